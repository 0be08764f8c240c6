#pragma once

// Perceptual distance over a frozen feature extractor plus the exponentially
// weighted average of the training model that usually plays that role.
//
// Distance: for each tapped stage output, unit-normalize the feature vector
// across channels at every spatial position, take squared differences,
// average over channels and positions, and sum the per-layer results. No
// learned calibration weights. The value is differentiable in the second
// argument; gradients never touch the feature extractor's parameters.

#include <array>
#include <cmath>

#include "oaat/model.hpp"

namespace oaat {

template <typename T>
struct LpipsContext {
  SmallResNet<T>* features = nullptr;  // frozen; forwards run in eval mode
  double norm_eps = 1e-10;
};

// Per-sample distances [B]. If dx2 is non-null it receives d(sum_b dist_b)/dx2.
template <typename T>
Tensor<T> lpips_distance(LpipsContext<T>& ctx, const Tensor<T>& x1, const Tensor<T>& x2,
                         Tensor<T>* dx2 = nullptr) {
  SmallResNet<T>& net = *ctx.features;
  const int64_t B = x1.shape[0];

  net.forward(x1, NormMode::eval, GradScope::none);
  std::array<Tensor<T>, 3> ref;
  {
    auto taps = net.taps();
    for (int l = 0; l < 3; ++l) ref[static_cast<size_t>(l)] = *taps[static_cast<size_t>(l)];
  }
  net.forward(x2, NormMode::eval, dx2 ? GradScope::input : GradScope::none);
  auto taps = net.taps();

  Tensor<T> dist({B});
  std::array<Tensor<T>, 3> tap_grads;
  for (int l = 0; l < 3; ++l) {
    const Tensor<T>& f1 = ref[static_cast<size_t>(l)];
    const Tensor<T>& f2 = *taps[static_cast<size_t>(l)];
    const int64_t C = f1.shape[1], H = f1.shape[2], W = f1.shape[3], hw = H * W;
    const double k = 1.0 / static_cast<double>(C * hw);
    if (dx2) tap_grads[static_cast<size_t>(l)] = Tensor<T>(f2.shape);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < hw; ++p) {
        double s1 = 0, s2 = 0;
        for (int64_t c = 0; c < C; ++c) {
          const double a = f1.data[static_cast<size_t>((b * C + c) * hw + p)];
          const double v = f2.data[static_cast<size_t>((b * C + c) * hw + p)];
          s1 += a * a;
          s2 += v * v;
        }
        const double n1 = std::sqrt(s1), n2 = std::sqrt(s2);
        const double d1 = n1 + ctx.norm_eps, d2 = n2 + ctx.norm_eps;
        double acc = 0, dot = 0;
        for (int64_t c = 0; c < C; ++c) {
          const double a = f1.data[static_cast<size_t>((b * C + c) * hw + p)] / d1;
          const double f = f2.data[static_cast<size_t>((b * C + c) * hw + p)];
          const double v = f / d2;
          const double g = v - a;
          acc += g * g;
          dot += g * f;
        }
        dist[b] += static_cast<T>(k * acc);
        if (dx2) {
          Tensor<T>& tg = tap_grads[static_cast<size_t>(l)];
          const double inv_n2 = n2 > 0 ? 1.0 / n2 : 0.0;
          for (int64_t c = 0; c < C; ++c) {
            const double f = f2.data[static_cast<size_t>((b * C + c) * hw + p)];
            const double v = f / d2;
            const double a = f1.data[static_cast<size_t>((b * C + c) * hw + p)] / d1;
            const double g = v - a;
            tg.data[static_cast<size_t>((b * C + c) * hw + p)] = static_cast<T>(
                (2.0 * k / d2) * (g - f * dot * inv_n2 / d2));
          }
        }
      }
  }
  if (dx2) {
    std::array<const Tensor<T>*, 3> tg = {&tap_grads[0], &tap_grads[1], &tap_grads[2]};
    *dx2 = net.backward(nullptr, tg, GradScope::input);
  }
  return dist;
}

// ---------------------------------------------------------------- EWA ------
template <typename T>
struct EwaState {
  SmallResNet<T> shadow;
  double tau = 0.995;
  int64_t updates = 0;
};

template <typename T>
EwaState<T> make_ewa(SmallResNet<T>& live, double tau) {
  EwaState<T> e;
  e.tau = tau;
  e.shadow.configure(live.cfg);
  copy_weights(e.shadow, live);
  return e;
}

// shadow <- tau * shadow + (1 - tau) * live, elementwise, over parameters and
// normalization running statistics alike (the shadow serves as a frozen
// feature extractor, so its statistics must track the live net).
template <typename T>
void ewa_update(EwaState<T>& ewa, SmallResNet<T>& live) {
  const T tau = static_cast<T>(ewa.tau);
  const T om = static_cast<T>(1.0 - ewa.tau);
  auto ps = live.params();
  auto pd = ewa.shadow.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    Tensor<T>& d = *pd[i].value;
    const Tensor<T>& s = *ps[i].value;
    for (size_t j = 0; j < d.data.size(); ++j) d.data[j] = tau * d.data[j] + om * s.data[j];
  }
  auto bs = live.buffers();
  auto bd = ewa.shadow.buffers();
  for (size_t i = 0; i < bs.size(); ++i) {
    Tensor<T>& d = *bd[i].second;
    const Tensor<T>& s = *bs[i].second;
    for (size_t j = 0; j < d.data.size(); ++j) d.data[j] = tau * d.data[j] + om * s.data[j];
  }
  ++ewa.updates;
}

}  // namespace oaat
