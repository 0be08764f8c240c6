#pragma once

// Attack generation. Everything is deterministic under
// (model, batch, spec, seed), never mutates model parameters, and runs the
// network with normalization statistics in inference mode. Perturbations are
// kept inside the threat-model ball and the [0,1] pixel box.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "oaat/data.hpp"
#include "oaat/losses.hpp"
#include "oaat/model.hpp"
#include "oaat/perceptual.hpp"

namespace oaat {

enum class NormKind { linf, l2 };

struct ThreatModel {
  NormKind norm = NormKind::linf;
  double eps = 8.0 / 255.0;
  bool clamp_pixel = true;
};

enum class AttackLoss { ce, kl, ce_minus_lpips, ce_minus_disc };
enum class AttackInit { zero, uniform };

struct AttackSpec {
  AttackLoss loss = AttackLoss::ce;
  int steps = 10;
  double step_size = -1;    // negative: use 2 * eps / steps
  AttackInit init = AttackInit::uniform;
  double init_radius = -1;  // negative: use threat eps
  double lambda = 0;        // weight of the lpips / discriminator term
  uint64_t seed = 0;
};

template <typename T>
struct Perturbation {
  Tensor<T> delta;
  ThreatModel threat;
  int steps_run = 0;
};

struct NumericError : std::runtime_error {
  int step;
  explicit NumericError(const std::string& what, int step_) : std::runtime_error(what), step(step_) {}
};

// Projection onto the threat-model ball. Idempotent; leaves interior points
// untouched. l2 is per sample.
template <typename T>
void project(Tensor<T>& delta, const ThreatModel& tm) {
  if (!delta.all_finite()) throw NumericError("project: non-finite perturbation", -1);
  if (tm.norm == NormKind::linf) {
    const T e = static_cast<T>(tm.eps);
    for (auto& v : delta.data) v = std::clamp(v, -e, e);
  } else {
    const int64_t B = delta.shape[0];
    const int64_t chw = delta.numel() / std::max<int64_t>(B, 1);
    for (int64_t b = 0; b < B; ++b) {
      T* p = &delta.data[static_cast<size_t>(b * chw)];
      double n2 = 0;
      for (int64_t i = 0; i < chw; ++i) n2 += static_cast<double>(p[i]) * p[i];
      const double n = std::sqrt(n2);
      if (n > tm.eps && n > 0) {
        const T s = static_cast<T>(tm.eps / n);
        for (int64_t i = 0; i < chw; ++i) p[i] *= s;
      }
    }
  }
}

// delta <- clip(x + delta, 0, 1) - x
template <typename T>
void clamp_to_box(Tensor<T>& delta, const Tensor<T>& x) {
  for (size_t i = 0; i < delta.data.size(); ++i) {
    const T v = std::clamp(x.data[i] + delta.data[i], T(0), T(1));
    delta.data[i] = v - x.data[i];
  }
}

template <typename T>
struct AttackNets {
  SmallResNet<T>* model = nullptr;
  LpipsContext<T>* lpips = nullptr;   // required for ce_minus_lpips
  Discriminator<T>* disc = nullptr;   // required for ce_minus_disc
};

namespace attack_detail {

// Gradient of the attack objective w.r.t. the adversarial input. Objectives
// are means over the batch; ascent directions are invariant to that scaling.
template <typename T>
Tensor<T> objective_grad(AttackNets<T>& nets, const ImageBatch<T>& batch, const Tensor<T>& x_adv,
                         const Tensor<T>& delta, const AttackSpec& spec,
                         const Tensor<T>* kl_target, double* value_out) {
  SmallResNet<T>& net = *nets.model;
  const Tensor<T>& logits = net.forward(x_adv, NormMode::eval, GradScope::input);
  double value = 0;
  Tensor<T> dlogits;
  switch (spec.loss) {
    case AttackLoss::ce:
    case AttackLoss::ce_minus_lpips:
    case AttackLoss::ce_minus_disc: {
      LossGrad<T> lg = ce_with_grad(logits, batch.y);
      value = lg.value;
      dlogits = std::move(lg.dlogits);
      break;
    }
    case AttackLoss::kl: {
      LossGrad<T> lg = kl_const_target(logits, *kl_target);
      value = lg.value;
      dlogits = std::move(lg.dlogits);
      break;
    }
  }
  Tensor<T> dx = net.backward(dlogits, GradScope::input);

  if (spec.loss == AttackLoss::ce_minus_lpips && spec.lambda != 0) {
    if (!nets.lpips) throw std::invalid_argument("ce_minus_lpips attack needs an lpips context");
    Tensor<T> dx2;
    Tensor<T> d = lpips_distance(*nets.lpips, batch.x, x_adv, &dx2);
    const double bsz = static_cast<double>(batch.size());
    value -= spec.lambda * static_cast<double>(d.sum()) / bsz;
    dx.axpy(static_cast<T>(-spec.lambda / bsz), dx2);
  } else if (spec.loss == AttackLoss::ce_minus_disc && spec.lambda != 0) {
    if (!nets.disc) throw std::invalid_argument("ce_minus_disc attack needs a discriminator");
    const int64_t B = batch.x.shape[0], C = batch.x.shape[1], hw = batch.x.shape[2] * batch.x.shape[3];
    Tensor<T> pair({B, 2 * C, batch.x.shape[2], batch.x.shape[3]});
    for (int64_t b = 0; b < B; ++b) {
      std::copy_n(&batch.x.data[static_cast<size_t>(b * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>(b * 2 * C * hw)]);
      std::copy_n(&delta.data[static_cast<size_t>(b * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>((b * 2 * C + C) * hw)]);
    }
    const Tensor<T>& dlogit_in = nets.disc->forward(pair, NormMode::eval, GradScope::input);
    std::vector<int> oi_labels(static_cast<size_t>(B), 0);  // oracle-immune class
    LossGrad<T> bce = bce_with_grad(dlogit_in, oi_labels);
    value -= spec.lambda * bce.value;
    Tensor<T> dpair = nets.disc->backward(bce.dlogits, GradScope::input);
    // gradient reaches delta only through the perturbation channels
    for (int64_t b = 0; b < B; ++b) {
      const T* src = &dpair.data[static_cast<size_t>((b * 2 * C + C) * hw)];
      T* dst = &dx.data[static_cast<size_t>(b * C * hw)];
      for (int64_t i = 0; i < C * hw; ++i) dst[i] += static_cast<T>(-spec.lambda) * src[i];
    }
  }
  if (value_out) *value_out = value;
  return dx;
}

}  // namespace attack_detail

template <typename T>
Perturbation<T> pgd(AttackNets<T> nets, const ImageBatch<T>& batch, const ThreatModel& tm,
                    const AttackSpec& spec) {
  if (spec.steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
  const double step =
      spec.step_size >= 0 ? spec.step_size : 2.0 * tm.eps / static_cast<double>(spec.steps);

  Perturbation<T> out;
  out.threat = tm;
  out.delta = Tensor<T>(batch.x.shape);
  if (spec.init == AttackInit::uniform) {
    const double r = spec.init_radius >= 0 ? spec.init_radius : tm.eps;
    auto g = make_stream(spec.seed, "attack_init");
    for (auto& v : out.delta.data) v = static_cast<T>(uniform(g, -r, r));
  }
  project(out.delta, tm);
  if (tm.clamp_pixel) clamp_to_box(out.delta, batch.x);

  // KL objective: the clean prediction is the constant target.
  Tensor<T> kl_target;
  if (spec.loss == AttackLoss::kl)
    kl_target = softmax_rows(nets.model->forward(batch.x, NormMode::eval, GradScope::none));

  Tensor<T> x_adv(batch.x.shape);
  for (int s = 0; s < spec.steps; ++s) {
    for (size_t i = 0; i < x_adv.data.size(); ++i)
      x_adv.data[i] = batch.x.data[i] + out.delta.data[i];
    double value = 0;
    Tensor<T> g = attack_detail::objective_grad(nets, batch, x_adv, out.delta, spec, &kl_target,
                                                &value);
    if (!std::isfinite(value) || !g.all_finite())
      throw NumericError("pgd: non-finite objective or gradient at step " + std::to_string(s), s);
    if (tm.norm == NormKind::linf) {
      const T st = static_cast<T>(step);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const T gv = g.data[i];
        out.delta.data[i] += gv > T(0) ? st : (gv < T(0) ? -st : T(0));
      }
    } else {
      const int64_t B = g.shape[0];
      const int64_t chw = g.numel() / B;
      for (int64_t b = 0; b < B; ++b) {
        T* gp = &g.data[static_cast<size_t>(b * chw)];
        T* dp = &out.delta.data[static_cast<size_t>(b * chw)];
        double n2 = 0;
        for (int64_t i = 0; i < chw; ++i) n2 += static_cast<double>(gp[i]) * gp[i];
        const double n = std::sqrt(n2);
        if (n > 0) {
          const T sc = static_cast<T>(step / n);
          for (int64_t i = 0; i < chw; ++i) dp[i] += sc * gp[i];
        }
      }
    }
    project(out.delta, tm);
    if (tm.clamp_pixel) clamp_to_box(out.delta, batch.x);
    out.steps_run = s + 1;
  }
  return out;
}

template <typename T>
Perturbation<T> pgd(SmallResNet<T>& model, const ImageBatch<T>& batch, const ThreatModel& tm,
                    const AttackSpec& spec) {
  AttackNets<T> nets;
  nets.model = &model;
  return pgd(nets, batch, tm, spec);
}

// FGSM is the one-step, zero-init, full-step special case of pgd.
template <typename T>
Perturbation<T> fgsm(SmallResNet<T>& model, const ImageBatch<T>& batch, const ThreatModel& tm) {
  AttackSpec spec;
  spec.loss = AttackLoss::ce;
  spec.steps = 1;
  spec.step_size = tm.eps;
  spec.init = AttackInit::zero;
  return pgd(model, batch, tm, spec);
}

// Uniform start in [-noise_r, noise_r], one sign step of eps - noise_r, project.
template <typename T>
Perturbation<T> rfgsm(SmallResNet<T>& model, const ImageBatch<T>& batch, const ThreatModel& tm,
                      double noise_r, uint64_t seed) {
  if (noise_r < 0 || noise_r > tm.eps) throw std::invalid_argument("rfgsm: need 0 <= noise_r <= eps");
  AttackSpec spec;
  spec.loss = AttackLoss::ce;
  spec.steps = 1;
  spec.step_size = tm.eps - noise_r;
  spec.init = AttackInit::uniform;
  spec.init_radius = noise_r;
  spec.seed = seed;
  return pgd(model, batch, tm, spec);
}

// Oracle-sensitive attack: run the inner maximization at the reference budget,
// then project the result onto the current (smaller) budget.
template <typename T>
struct OsAttackResult {
  Tensor<T> delta_hat;    // at eps_ref
  Tensor<T> delta_tilde;  // projected to eps_tilde
};

template <typename T>
OsAttackResult<T> os_attack(SmallResNet<T>& model, const ImageBatch<T>& batch, double eps_ref,
                            double eps_tilde, const AttackSpec& spec) {
  if (eps_tilde > eps_ref) throw std::invalid_argument("os_attack: eps_tilde must be <= eps_ref");
  ThreatModel ref{NormKind::linf, eps_ref, true};
  Perturbation<T> hat = pgd(model, batch, ref, spec);
  OsAttackResult<T> out;
  out.delta_tilde = hat.delta;
  out.delta_hat = std::move(hat.delta);
  ThreatModel tight{NormKind::linf, eps_tilde, true};
  project(out.delta_tilde, tight);
  clamp_to_box(out.delta_tilde, batch.x);
  return out;
}

// ------------------------------------------------------------- Square -----
// Simplified score-based attack: vertical-stripe init, square patch proposals
// of decaying side, accepted only when the margin objective strictly
// decreases. Gradient-free; per-sample RNG streams make a longer query budget
// extend a shorter one's proposal sequence exactly.
template <typename T>
Perturbation<T> square_attack(SmallResNet<T>& model, const ImageBatch<T>& batch,
                              const ThreatModel& tm, int n_queries, uint64_t seed,
                              double p_init = 0.8) {
  if (tm.norm != NormKind::linf) throw std::invalid_argument("square_attack: linf only");
  if (n_queries < 1) throw std::invalid_argument("square_attack: need n_queries >= 1");
  const int64_t B = batch.x.shape[0], C = batch.x.shape[1], H = batch.x.shape[2],
                W = batch.x.shape[3];
  const T e = static_cast<T>(tm.eps);

  Perturbation<T> out;
  out.threat = tm;
  out.delta = Tensor<T>(batch.x.shape);
  std::vector<std::mt19937_64> gs;
  gs.reserve(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) gs.push_back(make_stream(seed, "square", static_cast<uint64_t>(b)));

  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t w = 0; w < W; ++w) {
        const T v = uniform01(gs[static_cast<size_t>(b)]) < 0.5 ? -e : e;
        for (int64_t h = 0; h < H; ++h) out.delta.at(b, c, h, w) = v;
      }
  if (tm.clamp_pixel) clamp_to_box(out.delta, batch.x);

  auto margins = [&](const Tensor<T>& delta) {
    Tensor<T> xa(batch.x.shape);
    for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = batch.x.data[i] + delta.data[i];
    const Tensor<T>& z = model.forward(xa, NormMode::eval, GradScope::none);
    std::vector<double> m(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
      const int yy = batch.y[static_cast<size_t>(i)];
      double other = -1e30;
      for (int64_t j = 0; j < z.shape[1]; ++j)
        if (j != yy) other = std::max(other, static_cast<double>(z.at(i, j)));
      m[static_cast<size_t>(i)] = static_cast<double>(z.at(i, yy)) - other;
    }
    return m;
  };

  std::vector<double> best = margins(out.delta);
  out.steps_run = 1;

  Tensor<T> prop = out.delta;
  for (int q = 1; q < n_queries; ++q) {
    const double p = p_init * std::pow(0.5, q / 50);
    const int side = std::max<int64_t>(
        1, std::min<int64_t>(std::min(H, W),
                             std::llround(std::sqrt(p * static_cast<double>(H * W)))));
    prop = out.delta;
    for (int64_t b = 0; b < B; ++b) {
      auto& g = gs[static_cast<size_t>(b)];
      const int top = uniform_int(g, static_cast<int>(H) - side + 1);
      const int left = uniform_int(g, static_cast<int>(W) - side + 1);
      for (int64_t c = 0; c < C; ++c) {
        const T v = uniform01(g) < 0.5 ? -e : e;
        for (int h = 0; h < side; ++h)
          for (int w = 0; w < side; ++w) prop.at(b, c, top + h, left + w) = v;
      }
    }
    if (tm.clamp_pixel) clamp_to_box(prop, batch.x);
    const std::vector<double> m = margins(prop);
    const int64_t chw = C * H * W;
    for (int64_t b = 0; b < B; ++b)
      if (m[static_cast<size_t>(b)] < best[static_cast<size_t>(b)]) {
        best[static_cast<size_t>(b)] = m[static_cast<size_t>(b)];
        std::copy_n(&prop.data[static_cast<size_t>(b * chw)], chw,
                    &out.delta.data[static_cast<size_t>(b * chw)]);
      }
    out.steps_run = q + 1;
  }
  return out;
}

// ----------------------------------------------- discriminator training ----
template <typename T>
struct DiscriminatorResult {
  Discriminator<T> disc;
  double holdout_accuracy = 0;
};

// Trains the oracle-immune/oracle-sensitive pair discriminator: positives are
// (image, own OS perturbation), negatives pair each image with another
// sample's perturbation (rotate-by-one shuffle). Returns held-out accuracy.
template <typename T>
DiscriminatorResult<T> train_oi_discriminator(SmallResNet<T>& model, const Dataset& data,
                                              int epochs, double eps, uint64_t seed) {
  if (data.size() < 8) throw std::invalid_argument("discriminator training needs >= 8 samples");
  DiscriminatorResult<T> out;
  out.disc.configure(static_cast<int>(data.x.shape[1]));
  out.disc.init_params(seed);
  Sgd<T> opt;
  opt.momentum = 0.9;
  opt.weight_decay = 5e-4;

  const int bs = 32;
  BatchStream stream(data, bs, seed, 1);
  const int nb = stream.n_batches();
  const int held = std::max(1, nb / 5);

  // Pre-generate perturbation pairs once; the model stays frozen throughout.
  std::vector<Tensor<T>> xs, ds;
  for (int bi = 0; bi < nb; ++bi) {
    ImageBatchf bf = stream.get(bi);
    ImageBatch<T> b{bf.x.template cast<T>(), bf.y, bf.n_classes};
    AttackSpec spec;
    spec.loss = AttackLoss::ce;
    spec.steps = 10;
    spec.seed = stream_seed(seed, "disc_pgd", static_cast<uint64_t>(bi));
    ThreatModel tm{NormKind::linf, eps, true};
    Perturbation<T> pert = pgd(model, b, tm, spec);
    xs.push_back(std::move(b.x));
    ds.push_back(std::move(pert.delta));
  }

  auto build_pairs = [&](int bi, Tensor<T>& pair, std::vector<int>& labels) {
    const Tensor<T>& x = xs[static_cast<size_t>(bi)];
    const Tensor<T>& d = ds[static_cast<size_t>(bi)];
    const int64_t B = x.shape[0], C = x.shape[1], hw = x.shape[2] * x.shape[3];
    pair = Tensor<T>({2 * B, 2 * C, x.shape[2], x.shape[3]});
    labels.assign(static_cast<size_t>(2 * B), 0);
    for (int64_t i = 0; i < B; ++i) {
      // matched pair -> label 1
      std::copy_n(&x.data[static_cast<size_t>(i * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>(i * 2 * C * hw)]);
      std::copy_n(&d.data[static_cast<size_t>(i * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>((i * 2 * C + C) * hw)]);
      labels[static_cast<size_t>(i)] = 1;
      // shuffled pair -> label 0
      const int64_t j = (i + 1) % B;
      std::copy_n(&x.data[static_cast<size_t>(i * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>((B + i) * 2 * C * hw)]);
      std::copy_n(&d.data[static_cast<size_t>(j * C * hw)], C * hw,
                  &pair.data[static_cast<size_t>(((B + i) * 2 * C + C) * hw)]);
    }
  };

  for (int ep = 0; ep < epochs; ++ep) {
    for (int bi = 0; bi < nb - held; ++bi) {
      Tensor<T> pair;
      std::vector<int> labels;
      build_pairs(bi, pair, labels);
      const Tensor<T>& logit = out.disc.forward(pair, NormMode::train, GradScope::full);
      LossGrad<T> lg = bce_with_grad(logit, labels);
      out.disc.zero_grad();
      out.disc.backward(lg.dlogits, GradScope::full);
      auto ps = out.disc.params();
      opt.step(ps, 0.05);
    }
  }

  int64_t ok = 0, tot = 0;
  for (int bi = nb - held; bi < nb; ++bi) {
    Tensor<T> pair;
    std::vector<int> labels;
    build_pairs(bi, pair, labels);
    const Tensor<T>& logit = out.disc.forward(pair, NormMode::eval, GradScope::none);
    for (int64_t i = 0; i < logit.numel(); ++i) {
      const int pred = logit[i] > T(0) ? 1 : 0;
      ok += pred == labels[static_cast<size_t>(i)];
      ++tot;
    }
  }
  out.holdout_accuracy = static_cast<double>(ok) / static_cast<double>(tot);
  return out;
}

}  // namespace oaat
