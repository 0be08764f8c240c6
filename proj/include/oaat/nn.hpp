#pragma once

// Minimal layer zoo with hand-written backward passes. Layers own their
// output and whatever caches their backward needs; GradScope controls how
// much is cached (attack generation only needs input gradients, training
// needs parameter gradients too). Convolution lowers to one GEMM per batch
// via im2col; Eigen supplies the GEMM.

#include <Eigen/Core>
#include <array>
#include <cstring>
#include <string>
#include <vector>

#include "oaat/rng.hpp"
#include "oaat/tensor.hpp"

namespace oaat {

enum class NormMode { train, eval };
enum class GradScope { none, input, full };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

namespace detail {
template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace detail

// ---------------------------------------------------------------- Conv2d --
template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
  Tensor<T> w, gw;  // [out_ch, in_ch*k*k]

  // caches / scratch
  Tensor<T> y;
  Tensor<T> col;   // [in_ch*k*k, B*Ho*Wo]
  Tensor<T> ybuf;  // [out_ch, B*Ho*Wo]
  std::vector<int64_t> x_shape;

  void configure(int ic, int oc, int k, int s, int p) {
    in_ch = ic;
    out_ch = oc;
    ksize = k;
    stride = s;
    pad = p;
    w = Tensor<T>({oc, static_cast<int64_t>(ic) * k * k});
    gw = Tensor<T>(w.shape);
  }

  void init_params(std::mt19937_64& g) {
    const double fan_in = static_cast<double>(in_ch) * ksize * ksize;
    const double sd = std::sqrt(2.0 / fan_in);
    for (auto& v : w.data) v = static_cast<T>(sd * normal01(g));
  }

  int64_t out_hw(int64_t in, int /*unused*/) const {
    return (in + 2 * pad - ksize) / stride + 1;
  }

  void im2col(const Tensor<T>& x, Tensor<T>& out) const {
    const int64_t B = x.shape[0], H = x.shape[2], W = x.shape[3];
    const int64_t Ho = out_hw(H, 0), Wo = out_hw(W, 0);
    out = Tensor<T>({static_cast<int64_t>(in_ch) * ksize * ksize, B * Ho * Wo});
    T* op = out.ptr();
    for (int c = 0; c < in_ch; ++c)
      for (int kh = 0; kh < ksize; ++kh)
        for (int kw = 0; kw < ksize; ++kw) {
          for (int64_t b = 0; b < B; ++b) {
            const T* xp = &x.data[static_cast<size_t>((b * in_ch + c) * H * W)];
            for (int64_t oh = 0; oh < Ho; ++oh) {
              const int64_t ih = oh * stride + kh - pad;
              if (ih < 0 || ih >= H) {
                for (int64_t ow = 0; ow < Wo; ++ow) *op++ = T(0);
                continue;
              }
              const T* row = xp + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * stride + kw - pad;
                *op++ = (iw < 0 || iw >= W) ? T(0) : row[iw];
              }
            }
          }
        }
  }

  void col2im_add(const Tensor<T>& cols, Tensor<T>& dx) const {
    const int64_t B = dx.shape[0], H = dx.shape[2], W = dx.shape[3];
    const int64_t Ho = out_hw(H, 0), Wo = out_hw(W, 0);
    const T* cp = cols.ptr();
    for (int c = 0; c < in_ch; ++c)
      for (int kh = 0; kh < ksize; ++kh)
        for (int kw = 0; kw < ksize; ++kw) {
          for (int64_t b = 0; b < B; ++b) {
            T* xp = &dx.data[static_cast<size_t>((b * in_ch + c) * H * W)];
            for (int64_t oh = 0; oh < Ho; ++oh) {
              const int64_t ih = oh * stride + kh - pad;
              if (ih < 0 || ih >= H) {
                cp += Wo;
                continue;
              }
              T* row = xp + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * stride + kw - pad;
                if (iw >= 0 && iw < W) row[iw] += *cp;
                ++cp;
              }
            }
          }
        }
  }

  const Tensor<T>& forward(const Tensor<T>& x, GradScope scope) {
    x_shape = x.shape;
    const int64_t B = x.shape[0], H = x.shape[2], W = x.shape[3];
    const int64_t Ho = out_hw(H, 0), Wo = out_hw(W, 0);
    im2col(x, col);
    ybuf = Tensor<T>({out_ch, B * Ho * Wo});
    {
      detail::CMatMap<T> wm(w.ptr(), out_ch, w.shape[1]);
      detail::CMatMap<T> cm(col.ptr(), col.shape[0], col.shape[1]);
      detail::MatMap<T> ym(ybuf.ptr(), out_ch, col.shape[1]);
      ym.noalias() = wm * cm;
    }
    y = Tensor<T>({B, out_ch, Ho, Wo});
    const int64_t hw = Ho * Wo;
    for (int oc = 0; oc < out_ch; ++oc)
      for (int64_t b = 0; b < B; ++b)
        std::memcpy(&y.data[static_cast<size_t>((b * out_ch + oc) * hw)],
                    &ybuf.data[static_cast<size_t>(oc * B * hw + b * hw)],
                    sizeof(T) * static_cast<size_t>(hw));
    if (scope != GradScope::full) col = Tensor<T>();  // drop the big cache
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, GradScope scope) {
    const int64_t B = x_shape[0], H = x_shape[2], W = x_shape[3];
    const int64_t Ho = out_hw(H, 0), Wo = out_hw(W, 0), hw = Ho * Wo;
    Tensor<T> dybuf({out_ch, B * hw});
    for (int oc = 0; oc < out_ch; ++oc)
      for (int64_t b = 0; b < B; ++b)
        std::memcpy(&dybuf.data[static_cast<size_t>(oc * B * hw + b * hw)],
                    &dy.data[static_cast<size_t>((b * out_ch + oc) * hw)],
                    sizeof(T) * static_cast<size_t>(hw));
    if (scope == GradScope::full) {
      detail::CMatMap<T> dym(dybuf.ptr(), out_ch, B * hw);
      detail::CMatMap<T> cm(col.ptr(), col.shape[0], col.shape[1]);
      detail::MatMap<T> gm(gw.ptr(), out_ch, gw.shape[1]);
      gm.noalias() += dym * cm.transpose();
    }
    Tensor<T> dcol({w.shape[1], B * hw});
    {
      detail::CMatMap<T> wm(w.ptr(), out_ch, w.shape[1]);
      detail::CMatMap<T> dym(dybuf.ptr(), out_ch, B * hw);
      detail::MatMap<T> dcm(dcol.ptr(), dcol.shape[0], dcol.shape[1]);
      dcm.noalias() = wm.transpose() * dym;
    }
    Tensor<T> dx(x_shape);
    col2im_add(dcol, dx);
    return dx;
  }
};

// ----------------------------------------------------------- BatchNorm2d --
template <typename T>
struct BatchNorm2d {
  int ch = 0;
  double momentum = 0.1, eps = 1e-5;
  Tensor<T> gamma, beta, g_gamma, g_beta;
  Tensor<T> running_mean, running_var;

  // caches
  Tensor<T> y, xhat;
  std::vector<T> inv_std;
  NormMode fwd_mode = NormMode::train;
  int64_t nhw = 0;

  void configure(int c) {
    ch = c;
    gamma = Tensor<T>({c});
    beta = Tensor<T>({c});
    g_gamma = Tensor<T>({c});
    g_beta = Tensor<T>({c});
    running_mean = Tensor<T>({c});
    running_var = Tensor<T>({c});
    gamma.fill(T(1));
    running_var.fill(T(1));
  }

  const Tensor<T>& forward(const Tensor<T>& x, NormMode mode, GradScope scope) {
    fwd_mode = mode;
    const int64_t B = x.shape[0], H = x.shape[2], W = x.shape[3], hw = H * W;
    nhw = B * hw;
    y = Tensor<T>(x.shape);
    inv_std.assign(static_cast<size_t>(ch), T(0));
    const bool keep_xhat =
        scope == GradScope::full || (scope == GradScope::input && mode == NormMode::train);
    if (keep_xhat) xhat = Tensor<T>(x.shape);
    for (int c = 0; c < ch; ++c) {
      double mu, var;
      if (mode == NormMode::train) {
        double s = 0, s2 = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* xp = &x.data[static_cast<size_t>((b * ch + c) * hw)];
          for (int64_t i = 0; i < hw; ++i) {
            s += xp[i];
            s2 += static_cast<double>(xp[i]) * xp[i];
          }
        }
        mu = s / static_cast<double>(nhw);
        var = s2 / static_cast<double>(nhw) - mu * mu;
        var = std::max(var, 0.0);
        const double unbiased = nhw > 1 ? var * nhw / (nhw - 1.0) : var;
        running_mean[c] =
            static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
        running_var[c] =
            static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
      } else {
        mu = static_cast<double>(running_mean[c]);
        var = static_cast<double>(running_var[c]);
      }
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(c)] = static_cast<T>(is);
      const double g = static_cast<double>(gamma[c]), bta = static_cast<double>(beta[c]);
      for (int64_t b = 0; b < B; ++b) {
        const T* xp = &x.data[static_cast<size_t>((b * ch + c) * hw)];
        T* yp = &y.data[static_cast<size_t>((b * ch + c) * hw)];
        T* hp = keep_xhat ? &xhat.data[static_cast<size_t>((b * ch + c) * hw)] : nullptr;
        for (int64_t i = 0; i < hw; ++i) {
          const double h = (static_cast<double>(xp[i]) - mu) * is;
          if (hp) hp[i] = static_cast<T>(h);
          yp[i] = static_cast<T>(g * h + bta);
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, GradScope scope) {
    const int64_t B = dy.shape[0], H = dy.shape[2], W = dy.shape[3], hw = H * W;
    Tensor<T> dx(dy.shape);
    for (int c = 0; c < ch; ++c) {
      const double g = static_cast<double>(gamma[c]);
      const double is = static_cast<double>(inv_std[static_cast<size_t>(c)]);
      if (fwd_mode == NormMode::eval) {
        const double k = g * is;
        double sdy = 0, sdyh = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* dyp = &dy.data[static_cast<size_t>((b * ch + c) * hw)];
          T* dxp = &dx.data[static_cast<size_t>((b * ch + c) * hw)];
          const T* hp =
              scope == GradScope::full ? &xhat.data[static_cast<size_t>((b * ch + c) * hw)] : nullptr;
          for (int64_t i = 0; i < hw; ++i) {
            dxp[i] = static_cast<T>(k * dyp[i]);
            if (hp) {
              sdy += dyp[i];
              sdyh += static_cast<double>(dyp[i]) * hp[i];
            }
          }
        }
        if (scope == GradScope::full) {
          g_gamma[c] += static_cast<T>(sdyh);
          g_beta[c] += static_cast<T>(sdy);
        }
      } else {
        double sdy = 0, sdyh = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* dyp = &dy.data[static_cast<size_t>((b * ch + c) * hw)];
          const T* hp = &xhat.data[static_cast<size_t>((b * ch + c) * hw)];
          for (int64_t i = 0; i < hw; ++i) {
            sdy += dyp[i];
            sdyh += static_cast<double>(dyp[i]) * hp[i];
          }
        }
        const double n = static_cast<double>(nhw);
        const double k = g * is / n;
        for (int64_t b = 0; b < B; ++b) {
          const T* dyp = &dy.data[static_cast<size_t>((b * ch + c) * hw)];
          const T* hp = &xhat.data[static_cast<size_t>((b * ch + c) * hw)];
          T* dxp = &dx.data[static_cast<size_t>((b * ch + c) * hw)];
          for (int64_t i = 0; i < hw; ++i)
            dxp[i] = static_cast<T>(k * (n * dyp[i] - sdy - static_cast<double>(hp[i]) * sdyh));
        }
        if (scope == GradScope::full) {
          g_gamma[c] += static_cast<T>(sdyh);
          g_beta[c] += static_cast<T>(sdy);
        }
      }
    }
    return dx;
  }
};

// ------------------------------------------------------------------ ReLU --
template <typename T>
struct ReLU {
  Tensor<T> y;
  const Tensor<T>& forward(const Tensor<T>& x) {
    y = Tensor<T>(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(dy.shape);
    for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] = y.data[i] > T(0) ? dy.data[i] : T(0);
    return dx;
  }
};

// ---------------------------------------------------------------- Linear --
template <typename T>
struct Linear {
  int in = 0, out = 0;
  Tensor<T> w, b, gw, gb;  // w: [out, in]
  Tensor<T> y, xcache;

  void configure(int i, int o) {
    in = i;
    out = o;
    w = Tensor<T>({o, i});
    b = Tensor<T>({o});
    gw = Tensor<T>(w.shape);
    gb = Tensor<T>(b.shape);
  }
  void init_params(std::mt19937_64& g) {
    const double sd = std::sqrt(1.0 / in);
    for (auto& v : w.data) v = static_cast<T>(sd * normal01(g));
    b.zero();
  }

  const Tensor<T>& forward(const Tensor<T>& x, GradScope scope) {
    const int64_t B = x.shape[0];
    if (scope == GradScope::full) xcache = x;
    y = Tensor<T>({B, out});
    detail::CMatMap<T> xm(x.ptr(), B, in);
    detail::CMatMap<T> wm(w.ptr(), out, in);
    detail::MatMap<T> ym(y.ptr(), B, out);
    ym.noalias() = xm * wm.transpose();
    for (int64_t i = 0; i < B; ++i)
      for (int o = 0; o < out; ++o) y.at(i, o) += b[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, GradScope scope) {
    const int64_t B = dy.shape[0];
    if (scope == GradScope::full) {
      detail::CMatMap<T> dym(dy.ptr(), B, out);
      detail::CMatMap<T> xm(xcache.ptr(), B, in);
      detail::MatMap<T> gwm(gw.ptr(), out, in);
      gwm.noalias() += dym.transpose() * xm;
      for (int64_t i = 0; i < B; ++i)
        for (int o = 0; o < out; ++o) gb[o] += dy.at(i, o);
    }
    Tensor<T> dx({B, in});
    detail::CMatMap<T> dym(dy.ptr(), B, out);
    detail::CMatMap<T> wm(w.ptr(), out, in);
    detail::MatMap<T> dxm(dx.ptr(), B, in);
    dxm.noalias() = dym * wm;
    return dx;
  }
};

// ------------------------------------------------------------------- SGD --
// Momentum SGD with decoupled-from-nothing classic weight decay:
//   g = grad + wd * w;  m = mu * m + g;  w -= lr * m
template <typename T>
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<Tensor<T>> m;

  void step(std::vector<ParamRef<T>>& params, double lr) {
    if (m.size() != params.size()) {
      m.clear();
      for (auto& p : params) m.emplace_back(p.value->shape);
    }
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& w = *params[i].value;
      const Tensor<T>& g = *params[i].grad;
      Tensor<T>& mi = m[i];
      for (size_t j = 0; j < w.data.size(); ++j) {
        const T eff = g.data[j] + static_cast<T>(weight_decay) * w.data[j];
        mi.data[j] = static_cast<T>(momentum) * mi.data[j] + eff;
        w.data[j] -= static_cast<T>(lr) * mi.data[j];
      }
    }
  }
};

// ---------------------------------------------------------- GlobalAvgPool --
template <typename T>
struct GlobalAvgPool {
  Tensor<T> y;
  std::vector<int64_t> x_shape;
  const Tensor<T>& forward(const Tensor<T>& x) {
    x_shape = x.shape;
    const int64_t B = x.shape[0], C = x.shape[1], hw = x.shape[2] * x.shape[3];
    y = Tensor<T>({B, C});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const T* xp = &x.data[static_cast<size_t>((b * C + c) * hw)];
        double s = 0;
        for (int64_t i = 0; i < hw; ++i) s += xp[i];
        y.at(b, c) = static_cast<T>(s / static_cast<double>(hw));
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    const int64_t B = x_shape[0], C = x_shape[1], hw = x_shape[2] * x_shape[3];
    Tensor<T> dx(x_shape);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const T v = static_cast<T>(dy.at(b, c) / static_cast<T>(hw));
        T* dxp = &dx.data[static_cast<size_t>((b * C + c) * hw)];
        for (int64_t i = 0; i < hw; ++i) dxp[i] = v;
      }
    return dx;
  }
};

}  // namespace oaat
