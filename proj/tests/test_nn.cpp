#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oaat/losses.hpp"
#include "oaat/model.hpp"
#include "oaat/nn.hpp"
#include "oaat/rng.hpp"

using namespace oaat;

namespace {

Tensord randn(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
  Tensord x(std::move(shape));
  auto g = make_stream(seed, "randn");
  for (double& v : x.data) v = scale * normal01(g);
  return x;
}

double dot(const Tensord& a, const Tensord& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

// Reference convolution: direct quadruple loop, zero padding.
Tensord conv_naive(const Tensord& x, const Tensord& w, int in_ch, int out_ch, int k, int stride,
                   int pad) {
  const int64_t B = x.shape[0], H = x.shape[2], W = x.shape[3];
  const int64_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensord y({B, out_ch, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int oc = 0; oc < out_ch; ++oc)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double s = 0;
          for (int ic = 0; ic < in_ch; ++ic)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int64_t ih = oh * stride + kh - pad, iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                s += x.at(b, ic, ih, iw) * w.at(oc, static_cast<int64_t>((ic * k + kh) * k + kw));
              }
          y.at(b, oc, oh, ow) = s;
        }
  return y;
}

bool close(double a, double b, double abs_tol, double rel_tol) {
  return std::abs(a - b) <= abs_tol + rel_tol * std::max(std::abs(a), std::abs(b));
}

}  // namespace

TEST_CASE("conv forward matches the direct convolution") {
  for (int stride : {1, 2}) {
    Conv2d<double> conv;
    conv.configure(3, 4, 3, stride, 1);
    auto g = make_stream(7, "w", stride);
    conv.init_params(g);
    Tensord x = randn({2, 3, 5, 5}, 11 + stride);
    Tensord y = conv.forward(x, GradScope::none);
    Tensord want = conv_naive(x, conv.w, 3, 4, 3, stride, 1);
    REQUIRE(y.shape == want.shape);
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK_THAT(y[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
  }
}

TEST_CASE("conv gradients match finite differences") {
  Conv2d<double> conv;
  conv.configure(2, 3, 3, 2, 1);
  auto g = make_stream(13, "w");
  conv.init_params(g);
  Tensord x = randn({2, 2, 4, 4}, 17);

  // Linear functional of the output keeps the FD second-order error tiny.
  Tensord r = randn(conv.forward(x, GradScope::none).shape, 19);
  auto value = [&](const Tensord& xx, const Tensord& ww) {
    Conv2d<double> c2 = conv;
    c2.w = ww;
    return dot(c2.forward(xx, GradScope::none), r);
  };

  conv.gw.zero();
  conv.forward(x, GradScope::full);
  Tensord dx = conv.backward(r, GradScope::full);

  const double h = 1e-6;
  for (int64_t i = 0; i < x.numel(); i += 3) {
    Tensord xp = x;
    xp[i] += h;
    Tensord xm = x;
    xm[i] -= h;
    const double fd = (value(xp, conv.w) - value(xm, conv.w)) / (2 * h);
    CHECK_THAT(dx[i], Catch::Matchers::WithinAbs(fd, 1e-7));
  }
  for (int64_t i = 0; i < conv.w.numel(); i += 5) {
    Tensord wp = conv.w;
    wp[i] += h;
    Tensord wm = conv.w;
    wm[i] -= h;
    const double fd = (value(x, wp) - value(x, wm)) / (2 * h);
    CHECK_THAT(conv.gw[i], Catch::Matchers::WithinAbs(fd, 1e-7));
  }
}

TEST_CASE("batchnorm train mode normalizes and tracks unbiased running stats") {
  BatchNorm2d<double> bn;
  bn.configure(2);
  Tensord x = randn({3, 2, 2, 2}, 23, 2.5);
  const int64_t nhw = 3 * 2 * 2;

  Tensord y = bn.forward(x, NormMode::train, GradScope::none);
  for (int c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          const double v = y.at(b, c, i, j);
          s += v;
          s2 += v * v;
        }
    const double mean = s / static_cast<double>(nhw);
    const double var = s2 / static_cast<double>(nhw) - mean * mean;
    CHECK_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
    // eps shrinks the normalized variance slightly below 1
    CHECK_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));

    double xs = 0, xs2 = 0;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          const double v = x.at(b, c, i, j);
          xs += v;
          xs2 += v * v;
        }
    const double mu = xs / static_cast<double>(nhw);
    const double biased = xs2 / static_cast<double>(nhw) - mu * mu;
    const double unbiased = biased * static_cast<double>(nhw) / static_cast<double>(nhw - 1);
    CHECK_THAT(bn.running_mean[c], Catch::Matchers::WithinAbs(0.1 * mu, 1e-12));
    CHECK_THAT(bn.running_var[c], Catch::Matchers::WithinAbs(0.9 + 0.1 * unbiased, 1e-12));
  }
}

TEST_CASE("batchnorm eval mode uses running statistics only") {
  BatchNorm2d<double> bn;
  bn.configure(2);
  bn.running_mean.data = {0.5, -1.0};
  bn.running_var.data = {4.0, 0.25};
  bn.gamma.data = {2.0, 1.0};
  bn.beta.data = {0.0, 3.0};
  Tensord x = randn({2, 2, 3, 3}, 29);
  Tensord y = bn.forward(x, NormMode::eval, GradScope::none);
  for (int64_t b = 0; b < 2; ++b)
    for (int c = 0; c < 2; ++c)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) {
          const double mu = bn.running_mean[c], var = bn.running_var[c];
          const double want =
              bn.gamma[c] * (x.at(b, c, i, j) - mu) / std::sqrt(var + bn.eps) + bn.beta[c];
          CHECK_THAT(y.at(b, c, i, j), Catch::Matchers::WithinAbs(want, 1e-12));
        }
  // Eval-mode forward must not move the running stats.
  CHECK(bn.running_mean.data == std::vector<double>{0.5, -1.0});
  CHECK(bn.running_var.data == std::vector<double>{4.0, 0.25});
}

TEST_CASE("batchnorm gradients match finite differences in both modes") {
  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    BatchNorm2d<double> bn;
    bn.configure(2);
    auto gi = make_stream(31, "affine", mode == NormMode::train ? 0 : 1);
    for (double& v : bn.gamma.data) v = 1.0 + 0.3 * normal01(gi);
    for (double& v : bn.beta.data) v = 0.2 * normal01(gi);
    bn.running_mean.data = {0.3, -0.2};
    bn.running_var.data = {1.5, 0.8};
    Tensord x = randn({3, 2, 2, 2}, 37, 1.7);
    Tensord r = randn(x.shape, 41);

    auto value = [&](const Tensord& xx, const Tensord& gg, const Tensord& bb) {
      BatchNorm2d<double> b2 = bn;
      b2.gamma = gg;
      b2.beta = bb;
      return dot(b2.forward(xx, mode, GradScope::none), r);
    };

    bn.g_gamma.zero();
    bn.g_beta.zero();
    bn.forward(x, mode, GradScope::full);
    Tensord dx = bn.backward(r, GradScope::full);

    const double h = 1e-6;
    for (int64_t i = 0; i < x.numel(); ++i) {
      Tensord xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (value(xp, bn.gamma, bn.beta) - value(xm, bn.gamma, bn.beta)) / (2 * h);
      CHECK(close(dx[i], fd, 1e-7, 1e-7));
    }
    for (int c = 0; c < 2; ++c) {
      Tensord gp = bn.gamma, gm = bn.gamma;
      gp[c] += h;
      gm[c] -= h;
      double fd = (value(x, gp, bn.beta) - value(x, gm, bn.beta)) / (2 * h);
      CHECK(close(bn.g_gamma[c], fd, 1e-7, 1e-7));
      Tensord bp = bn.beta, bm = bn.beta;
      bp[c] += h;
      bm[c] -= h;
      fd = (value(x, bn.gamma, bp) - value(x, bn.gamma, bm)) / (2 * h);
      CHECK(close(bn.g_beta[c], fd, 1e-7, 1e-7));
    }
  }
}

TEST_CASE("relu forward and masked backward") {
  ReLU<double> relu;
  Tensord x({4});
  x.data = {-1.0, 0.0, 0.5, 2.0};
  Tensord y = relu.forward(x);
  CHECK(y.data == std::vector<double>{0.0, 0.0, 0.5, 2.0});
  Tensord dy({4});
  dy.fill(1.0);
  Tensord dx = relu.backward(dy);
  CHECK(dx.data == std::vector<double>{0.0, 0.0, 1.0, 1.0});
}

TEST_CASE("linear layer hand values and finite differences") {
  Linear<double> fc;
  fc.configure(2, 2);
  fc.w.data = {1.0, 2.0, -1.0, 0.5};
  fc.b.data = {0.1, -0.2};
  Tensord x({1, 2});
  x.data = {3.0, 4.0};
  Tensord y = fc.forward(x, GradScope::none);
  CHECK_THAT(y.at(int64_t(0), int64_t(0)), Catch::Matchers::WithinAbs(11.1, 1e-12));
  CHECK_THAT(y.at(int64_t(0), int64_t(1)), Catch::Matchers::WithinAbs(-1.2, 1e-12));

  Tensord xr = randn({3, 2}, 43);
  Tensord r = randn({3, 2}, 47);
  auto value = [&](const Tensord& xx, const Tensord& ww, const Tensord& bb) {
    Linear<double> f2 = fc;
    f2.w = ww;
    f2.b = bb;
    return dot(f2.forward(xx, GradScope::none), r);
  };
  fc.gw.zero();
  fc.gb.zero();
  fc.forward(xr, GradScope::full);
  Tensord dx = fc.backward(r, GradScope::full);
  const double h = 1e-6;
  for (int64_t i = 0; i < xr.numel(); ++i) {
    Tensord xp = xr, xm = xr;
    xp[i] += h;
    xm[i] -= h;
    CHECK_THAT(dx[i], Catch::Matchers::WithinAbs(
                          (value(xp, fc.w, fc.b) - value(xm, fc.w, fc.b)) / (2 * h), 1e-7));
  }
  for (int64_t i = 0; i < fc.w.numel(); ++i) {
    Tensord wp = fc.w, wm = fc.w;
    wp[i] += h;
    wm[i] -= h;
    CHECK_THAT(fc.gw[i], Catch::Matchers::WithinAbs(
                             (value(xr, wp, fc.b) - value(xr, wm, fc.b)) / (2 * h), 1e-7));
  }
  for (int64_t i = 0; i < 2; ++i) {
    Tensord bp = fc.b, bm = fc.b;
    bp[i] += h;
    bm[i] -= h;
    CHECK_THAT(fc.gb[i], Catch::Matchers::WithinAbs(
                             (value(xr, fc.w, bp) - value(xr, fc.w, bm)) / (2 * h), 1e-7));
  }
}

TEST_CASE("global average pool forward and backward") {
  GlobalAvgPool<double> gap;
  Tensord x({1, 2, 2, 2});
  x.data = {1, 2, 3, 4, 10, 20, 30, 40};
  Tensord y = gap.forward(x);
  CHECK_THAT(y.at(int64_t(0), int64_t(0)), Catch::Matchers::WithinAbs(2.5, 1e-15));
  CHECK_THAT(y.at(int64_t(0), int64_t(1)), Catch::Matchers::WithinAbs(25.0, 1e-15));
  Tensord dy({1, 2});
  dy.data = {4.0, 8.0};
  Tensord dx = gap.backward(dy);
  for (int64_t i = 0; i < 4; ++i) CHECK(dx[i] == 1.0);
  for (int64_t i = 4; i < 8; ++i) CHECK(dx[i] == 2.0);
}

TEST_CASE("sgd follows the momentum and weight decay recurrence") {
  Tensord w({2}), g({2});
  w.data = {1.0, -2.0};
  std::vector<ParamRef<double>> ps = {{"w", &w, &g}};
  Sgd<double> opt;
  opt.momentum = 0.9;
  opt.weight_decay = 0.1;

  double mw[2] = {0, 0}, ww[2] = {1.0, -2.0};
  const double lr = 0.2;
  for (int step = 0; step < 3; ++step) {
    g.data = {0.5, -0.25};
    opt.step(ps, lr);
    for (int i = 0; i < 2; ++i) {
      const double eff = g.data[static_cast<size_t>(i)] + 0.1 * ww[i];
      mw[i] = 0.9 * mw[i] + eff;
      ww[i] -= lr * mw[i];
      CHECK_THAT(w[i], Catch::Matchers::WithinAbs(ww[i], 1e-15));
    }
  }
}

TEST_CASE("sgd without momentum or decay is plain gradient descent") {
  Tensord w({1}), g({1});
  w.data = {4.0};
  g.data = {1.5};
  std::vector<ParamRef<double>> ps = {{"w", &w, &g}};
  Sgd<double> opt;
  opt.momentum = 0.0;
  opt.weight_decay = 0.0;
  opt.step(ps, 0.5);
  CHECK(w[0] == 4.0 - 0.5 * 1.5);
}

TEST_CASE("he initialization is deterministic in the seed") {
  SmallResNet<float> a, b, c;
  ModelConfig mc;
  a.configure(mc);
  b.configure(mc);
  c.configure(mc);
  a.init_params(5);
  b.init_params(5);
  c.init_params(6);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  bool all_same = true, any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    all_same = all_same && pa[i].value->data == pb[i].value->data;
    any_diff = any_diff || pa[i].value->data != pc[i].value->data;
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("conv init spread tracks the he standard deviation") {
  Conv2d<double> conv;
  conv.configure(3, 64, 3, 1, 1);
  auto g = make_stream(53, "he");
  conv.init_params(g);
  const double want_sd = std::sqrt(2.0 / 27.0);
  double s = 0, s2 = 0;
  for (double v : conv.w.data) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(conv.w.numel());
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  CHECK(std::abs(mean) < 0.05 * want_sd * 10);
  CHECK(std::abs(sd - want_sd) < 0.1 * want_sd);
}

TEST_CASE("default classifier parameter count") {
  SmallResNet<float> net;
  net.configure({});
  // Independent tally: stem 3*8*9, bn0 2*8, b1 two 8->8 convs with bns,
  // b2/b3 strided blocks with 1x1 projections, fc 32*10+10.
  const int64_t stem = 3 * 8 * 9, bn0 = 16;
  const int64_t b1 = 8 * 8 * 9 + 16 + 8 * 8 * 9 + 16;
  const int64_t b2 = 8 * 16 * 9 + 32 + 16 * 16 * 9 + 32 + 8 * 16 + 32;
  const int64_t b3 = 16 * 32 * 9 + 64 + 32 * 32 * 9 + 64 + 16 * 32 + 64;
  const int64_t fc = 32 * 10 + 10;
  CHECK(net.n_params() == stem + bn0 + b1 + b2 + b3 + fc);
  CHECK(net.n_params() == 19954);
}

TEST_CASE("small fd model stays under the kiloparameter budget") {
  SmallResNet<double> net;
  ModelConfig mc;
  mc.widths = {2, 2, 4};
  net.configure(mc);
  CHECK(net.n_params() <= 1000);
}

TEST_CASE("model parameter gradients match finite differences") {
  SmallResNet<double> net;
  ModelConfig mc;
  mc.widths = {2, 2, 4};
  net.configure(mc);
  net.init_params(59);
  Tensord x = randn({3, 3, 8, 8}, 61, 0.5);
  std::vector<int> y = {0, 4, 9};

  auto value = [&]() {
    return ce_with_grad(net.forward(x, NormMode::train, GradScope::none), y).value;
  };

  net.zero_grad();
  auto ce = ce_with_grad(net.forward(x, NormMode::train, GradScope::full), y);
  net.backward(ce.dlogits, GradScope::full);

  auto ps = net.params();
  auto g = make_stream(67, "pick");
  const double h = 1e-5;
  for (int probe = 0; probe < 24; ++probe) {
    auto& p = ps[uniform_int(g, static_cast<int64_t>(ps.size()))];
    const int64_t i = uniform_int(g, p.value->numel());
    const double orig = (*p.value)[i];
    (*p.value)[i] = orig + h;
    const double up = value();
    (*p.value)[i] = orig - h;
    const double dn = value();
    (*p.value)[i] = orig;
    const double fd = (up - dn) / (2 * h);
    CHECK(close((*p.grad)[i], fd, 1e-7, 1e-4));
  }
}

TEST_CASE("model input gradient matches finite differences in both modes") {
  SmallResNet<double> net;
  ModelConfig mc;
  mc.widths = {2, 2, 4};
  net.configure(mc);
  net.init_params(71);
  // Populate running stats so eval mode is nontrivial.
  Tensord warm = randn({4, 3, 8, 8}, 73, 0.5);
  net.forward(warm, NormMode::train, GradScope::none);

  Tensord x = randn({2, 3, 8, 8}, 79, 0.5);
  std::vector<int> y = {2, 7};
  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    auto ce = ce_with_grad(net.forward(x, mode, GradScope::input), y);
    Tensord dx = net.backward(ce.dlogits, GradScope::input);

    auto g = make_stream(83, "pick", mode == NormMode::train ? 0 : 1);
    const double h = 1e-5;
    for (int probe = 0; probe < 20; ++probe) {
      const int64_t i = uniform_int(g, x.numel());
      Tensord xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double up = ce_with_grad(net.forward(xp, mode, GradScope::none), y).value;
      const double dn = ce_with_grad(net.forward(xm, mode, GradScope::none), y).value;
      const double fd = (up - dn) / (2 * h);
      CHECK(close(dx[i], fd, 1e-7, 1e-4));
    }
  }
}

TEST_CASE("input gradient is identical under input and full scopes") {
  SmallResNet<double> net;
  ModelConfig mc;
  mc.widths = {2, 2, 4};
  net.configure(mc);
  net.init_params(89);
  Tensord x = randn({2, 3, 8, 8}, 97, 0.5);
  std::vector<int> y = {1, 3};

  auto c1 = ce_with_grad(net.forward(x, NormMode::train, GradScope::input), y);
  Tensord dxi = net.backward(c1.dlogits, GradScope::input);
  net.zero_grad();
  auto c2 = ce_with_grad(net.forward(x, NormMode::train, GradScope::full), y);
  Tensord dxf = net.backward(c2.dlogits, GradScope::full);
  CHECK(dxi.data == dxf.data);
}

TEST_CASE("copy_weights reproduces logits across scalar types") {
  ModelConfig mc;
  mc.widths = {4, 4, 8};
  SmallResNet<float> src;
  src.configure(mc);
  src.init_params(101);
  Tensorf warm({4, 3, 8, 8});
  auto g = make_stream(103, "warm");
  for (float& v : warm.data) v = static_cast<float>(uniform01(g));
  src.forward(warm, NormMode::train, GradScope::none);

  SmallResNet<double> dst;
  dst.configure(mc);
  copy_weights(dst, src);

  Tensorf xf({2, 3, 8, 8});
  for (float& v : xf.data) v = static_cast<float>(uniform01(g));
  Tensord xd = xf.cast<double>();
  Tensorf yf = src.forward(xf, NormMode::eval, GradScope::none);
  Tensord yd = dst.forward(xd, NormMode::eval, GradScope::none);
  REQUIRE(yf.numel() == yd.numel());
  for (int64_t i = 0; i < yf.numel(); ++i)
    CHECK_THAT(static_cast<double>(yf[i]), Catch::Matchers::WithinAbs(yd[i], 1e-4));
}

TEST_CASE("discriminator round trip and gradient shape") {
  Discriminator<double> d;
  d.configure(3);
  d.init_params(107);
  Tensord pair = randn({2, 6, 8, 8}, 109, 0.3);
  Tensord z = d.forward(pair, NormMode::train, GradScope::input);
  REQUIRE(z.shape == std::vector<int64_t>{2, 1});
  Tensord dz({2, 1});
  dz.fill(1.0);
  Tensord dx = d.backward(dz, GradScope::input);
  CHECK(dx.shape == pair.shape);
  CHECK(dx.all_finite());
}
