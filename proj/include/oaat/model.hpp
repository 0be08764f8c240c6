#pragma once

// Desk-scale residual classifier and the perturbation discriminator.
// The classifier exposes its three stage outputs as feature taps; backward
// accepts an optional gradient at each tap in addition to the logit gradient,
// which is what the perceptual distance needs.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "oaat/nn.hpp"

namespace oaat {

// ------------------------------------------------------------ BasicBlock --
template <typename T>
struct BasicBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  ReLU<T> relu1, relu2;
  bool has_proj = false;
  Conv2d<T> convp;
  BatchNorm2d<T> bnp;

  void configure(int in_ch, int out_ch, int stride) {
    conv1.configure(in_ch, out_ch, 3, stride, 1);
    bn1.configure(out_ch);
    conv2.configure(out_ch, out_ch, 3, 1, 1);
    bn2.configure(out_ch);
    has_proj = stride != 1 || in_ch != out_ch;
    if (has_proj) {
      convp.configure(in_ch, out_ch, 1, stride, 0);
      bnp.configure(out_ch);
    }
  }

  void init_params(std::mt19937_64& g) {
    conv1.init_params(g);
    conv2.init_params(g);
    if (has_proj) convp.init_params(g);
  }

  const Tensor<T>& forward(const Tensor<T>& x, NormMode mode, GradScope scope) {
    const Tensor<T>& a = relu1.forward(bn1.forward(conv1.forward(x, scope), mode, scope));
    Tensor<T> main = bn2.forward(conv2.forward(a, scope), mode, scope);
    if (has_proj)
      main += bnp.forward(convp.forward(x, scope), mode, scope);
    else
      main += x;
    return relu2.forward(main);
  }

  Tensor<T> backward(const Tensor<T>& dy, GradScope scope) {
    Tensor<T> d = relu2.backward(dy);
    Tensor<T> da = conv1.backward(
        bn1.backward(relu1.backward(conv2.backward(bn2.backward(d, scope), scope)), scope), scope);
    if (has_proj)
      da += convp.backward(bnp.backward(d, scope), scope);
    else
      da += d;
    return da;
  }

  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".conv1.w", &conv1.w, &conv1.gw});
    out.push_back({p + ".bn1.gamma", &bn1.gamma, &bn1.g_gamma});
    out.push_back({p + ".bn1.beta", &bn1.beta, &bn1.g_beta});
    out.push_back({p + ".conv2.w", &conv2.w, &conv2.gw});
    out.push_back({p + ".bn2.gamma", &bn2.gamma, &bn2.g_gamma});
    out.push_back({p + ".bn2.beta", &bn2.beta, &bn2.g_beta});
    if (has_proj) {
      out.push_back({p + ".convp.w", &convp.w, &convp.gw});
      out.push_back({p + ".bnp.gamma", &bnp.gamma, &bnp.g_gamma});
      out.push_back({p + ".bnp.beta", &bnp.beta, &bnp.g_beta});
    }
  }
  void collect_buffers(const std::string& p, std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    out.push_back({p + ".bn1.rmean", &bn1.running_mean});
    out.push_back({p + ".bn1.rvar", &bn1.running_var});
    out.push_back({p + ".bn2.rmean", &bn2.running_mean});
    out.push_back({p + ".bn2.rvar", &bn2.running_var});
    if (has_proj) {
      out.push_back({p + ".bnp.rmean", &bnp.running_mean});
      out.push_back({p + ".bnp.rvar", &bnp.running_var});
    }
  }
};

// ----------------------------------------------------------- SmallResNet --
struct ModelConfig {
  int in_ch = 3;
  int n_classes = 10;
  std::array<int, 3> widths = {8, 16, 32};
  int stem_stride = 2;
};

template <typename T>
struct SmallResNet {
  ModelConfig cfg;
  Conv2d<T> stem;
  BatchNorm2d<T> bn0;
  ReLU<T> relu0;
  BasicBlock<T> b1, b2, b3;
  GlobalAvgPool<T> gap;
  Linear<T> fc;

  void configure(const ModelConfig& c) {
    cfg = c;
    stem.configure(c.in_ch, c.widths[0], 3, c.stem_stride, 1);
    bn0.configure(c.widths[0]);
    b1.configure(c.widths[0], c.widths[0], 1);
    b2.configure(c.widths[0], c.widths[1], 2);
    b3.configure(c.widths[1], c.widths[2], 2);
    fc.configure(c.widths[2], c.n_classes);
  }

  void init_params(uint64_t seed) {
    auto g = make_stream(seed, "init");
    stem.init_params(g);
    b1.init_params(g);
    b2.init_params(g);
    b3.init_params(g);
    fc.init_params(g);
  }

  const Tensor<T>& forward(const Tensor<T>& x, NormMode mode, GradScope scope) {
    const Tensor<T>& s = relu0.forward(bn0.forward(stem.forward(x, scope), mode, scope));
    const Tensor<T>& t1 = b1.forward(s, mode, scope);
    const Tensor<T>& t2 = b2.forward(t1, mode, scope);
    const Tensor<T>& t3 = b3.forward(t2, mode, scope);
    return fc.forward(gap.forward(t3), scope);
  }

  const Tensor<T>& logits() const { return fc.y; }
  // Stage outputs, valid after forward.
  std::array<const Tensor<T>*, 3> taps() const { return {&b1.relu2.y, &b2.relu2.y, &b3.relu2.y}; }

  // dlogits and each tap gradient may be null. Returns d/dx.
  Tensor<T> backward(const Tensor<T>* dlogits,
                     const std::array<const Tensor<T>*, 3>& tap_grads, GradScope scope) {
    Tensor<T> d3;
    if (dlogits) d3 = gap.backward(fc.backward(*dlogits, scope));
    if (tap_grads[2]) {
      if (d3.numel() == 0) d3 = *tap_grads[2];
      else d3 += *tap_grads[2];
    }
    if (d3.numel() == 0) d3 = Tensor<T>(b3.relu2.y.shape);
    Tensor<T> d2 = b3.backward(d3, scope);
    if (tap_grads[1]) d2 += *tap_grads[1];
    Tensor<T> d1 = b2.backward(d2, scope);
    if (tap_grads[0]) d1 += *tap_grads[0];
    Tensor<T> ds = b1.backward(d1, scope);
    return stem.backward(bn0.backward(relu0.backward(ds), scope), scope);
  }

  Tensor<T> backward(const Tensor<T>& dlogits, GradScope scope) {
    return backward(&dlogits, {nullptr, nullptr, nullptr}, scope);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    out.push_back({"stem.w", &stem.w, &stem.gw});
    out.push_back({"bn0.gamma", &bn0.gamma, &bn0.g_gamma});
    out.push_back({"bn0.beta", &bn0.beta, &bn0.g_beta});
    b1.collect("b1", out);
    b2.collect("b2", out);
    b3.collect("b3", out);
    out.push_back({"fc.w", &fc.w, &fc.gw});
    out.push_back({"fc.b", &fc.b, &fc.gb});
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.push_back({"bn0.rmean", &bn0.running_mean});
    out.push_back({"bn0.rvar", &bn0.running_var});
    b1.collect_buffers("b1", out);
    b2.collect_buffers("b2", out);
    b3.collect_buffers("b3", out);
    return out;
  }

  void zero_grad() {
    for (auto& p : params()) p.grad->zero();
  }

  int64_t n_params() {
    int64_t n = 0;
    for (auto& p : params()) n += p.value->numel();
    return n;
  }
};

// Copy parameters and buffers (running stats) from one net to another of the
// same configuration.
template <typename T, typename U>
void copy_weights(SmallResNet<U>& dst, SmallResNet<T>& src) {
  auto ps = src.params();
  auto pd = dst.params();
  for (size_t i = 0; i < ps.size(); ++i) *pd[i].value = ps[i].value->template cast<U>();
  auto bs = src.buffers();
  auto bd = dst.buffers();
  for (size_t i = 0; i < bs.size(); ++i) *bd[i].second = bs[i].second->template cast<U>();
}

// -------------------------------------------------------- Discriminator ---
// Binary net over channel-concatenated (image, perturbation) pairs.
template <typename T>
struct Discriminator {
  int in_ch = 6;
  std::array<int, 2> widths = {8, 16};
  Conv2d<T> c1, c2;
  BatchNorm2d<T> n1, n2;
  ReLU<T> r1, r2;
  GlobalAvgPool<T> gap;
  Linear<T> fc;

  void configure(int image_channels, std::array<int, 2> w = {8, 16}) {
    in_ch = 2 * image_channels;
    widths = w;
    c1.configure(in_ch, w[0], 3, 2, 1);
    n1.configure(w[0]);
    c2.configure(w[0], w[1], 3, 2, 1);
    n2.configure(w[1]);
    fc.configure(w[1], 1);
  }
  void init_params(uint64_t seed) {
    auto g = make_stream(seed, "disc_init");
    c1.init_params(g);
    c2.init_params(g);
    fc.init_params(g);
  }

  const Tensor<T>& forward(const Tensor<T>& pair, NormMode mode, GradScope scope) {
    const Tensor<T>& a = r1.forward(n1.forward(c1.forward(pair, scope), mode, scope));
    const Tensor<T>& b = r2.forward(n2.forward(c2.forward(a, scope), mode, scope));
    return fc.forward(gap.forward(b), scope);
  }

  Tensor<T> backward(const Tensor<T>& dlogit, GradScope scope) {
    Tensor<T> d = gap.backward(fc.backward(dlogit, scope));
    d = c2.backward(n2.backward(r2.backward(d), scope), scope);
    return c1.backward(n1.backward(r1.backward(d), scope), scope);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    out.push_back({"d.c1.w", &c1.w, &c1.gw});
    out.push_back({"d.n1.gamma", &n1.gamma, &n1.g_gamma});
    out.push_back({"d.n1.beta", &n1.beta, &n1.g_beta});
    out.push_back({"d.c2.w", &c2.w, &c2.gw});
    out.push_back({"d.n2.gamma", &n2.gamma, &n2.g_gamma});
    out.push_back({"d.n2.beta", &n2.beta, &n2.g_beta});
    out.push_back({"d.fc.w", &fc.w, &fc.gw});
    out.push_back({"d.fc.b", &fc.b, &fc.gb});
    return out;
  }
  void zero_grad() {
    for (auto& p : params()) p.grad->zero();
  }
};

}  // namespace oaat
