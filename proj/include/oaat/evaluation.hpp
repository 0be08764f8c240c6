#pragma once

// Robust-accuracy measurement, gradient-masking diagnostics and
// contrast-binned model comparison. Everything here is read-only over the
// model: attacks and scoring forwards run with normalization in inference
// mode, and a parameter checksum is provided so tests can assert it.

#include <cstdint>
#include <string>
#include <vector>

#include "oaat/attacks.hpp"
#include "oaat/contrast.hpp"
#include "oaat/training.hpp"

namespace oaat {

// --------------------------------------------------------------- members --
struct AttackMember {
  enum class Kind { pgd, rfgsm, square };
  std::string name;
  Kind kind = Kind::pgd;
  AttackSpec spec;          // pgd members
  double rfgsm_noise = -1;  // < 0 -> eps / 2
  int square_queries = 500;
};

inline AttackMember pgd_member(const std::string& name, AttackLoss loss, int steps) {
  AttackMember m;
  m.name = name;
  m.kind = AttackMember::Kind::pgd;
  m.spec.loss = loss;
  m.spec.steps = steps;
  return m;
}

// The desk-scale default ensemble.
inline std::vector<AttackMember> desk_ensemble(int square_queries = 500) {
  std::vector<AttackMember> e;
  e.push_back(pgd_member("pgd50_ce", AttackLoss::ce, 50));
  e.push_back(pgd_member("pgd50_kl", AttackLoss::kl, 50));
  AttackMember r;
  r.name = "rfgsm";
  r.kind = AttackMember::Kind::rfgsm;
  e.push_back(r);
  AttackMember s;
  s.name = "square";
  s.kind = AttackMember::Kind::square;
  s.square_queries = square_queries;
  e.push_back(s);
  return e;
}

// ------------------------------------------------------- per-sample flags --
// flags[i] = 1 iff sample i is classified correctly on x + delta under this
// member. Seeds derive from (seed, "eval", member name, batch index).
template <typename T>
std::vector<uint8_t> robust_flags(SmallResNet<T>& model, const Dataset& data,
                                  const ThreatModel& tm, const AttackMember& member,
                                  uint64_t seed, int batch_size = 256) {
  std::vector<uint8_t> flags(static_cast<size_t>(data.size()), 0);
  BatchStream bs(data, batch_size, 0, 0);
  int64_t done = 0;
  for (int bi = 0; bi < bs.n_batches(); ++bi) {
    ImageBatchf bf = bs.get(bi);
    ImageBatch<T> b{bf.x.template cast<T>(), bf.y, bf.n_classes};
    const uint64_t s = stream_seed(seed, ("eval_" + member.name).c_str(),
                                   static_cast<uint64_t>(bi));
    Perturbation<T> p;
    switch (member.kind) {
      case AttackMember::Kind::pgd: {
        AttackSpec spec = member.spec;
        spec.seed = s;
        p = pgd(model, b, tm, spec);
        break;
      }
      case AttackMember::Kind::rfgsm: {
        const double nr = member.rfgsm_noise < 0 ? tm.eps / 2.0 : member.rfgsm_noise;
        p = rfgsm(model, b, tm, nr, s);
        break;
      }
      case AttackMember::Kind::square:
        p = square_attack(model, b, tm, member.square_queries, s);
        break;
    }
    Tensor<T> xa(b.x.shape);
    for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = b.x.data[i] + p.delta.data[i];
    const Tensor<T>& z = model.forward(xa, NormMode::eval, GradScope::none);
    auto pred = argmax_rows(z);
    for (size_t i = 0; i < pred.size(); ++i)
      flags[static_cast<size_t>(done) + i] = pred[i] == b.y[i] ? 1 : 0;
    done += b.size();
  }
  return flags;
}

inline double fraction_of(const std::vector<uint8_t>& flags) {
  if (flags.empty()) return 0;
  int64_t n = 0;
  for (uint8_t f : flags) n += f;
  return static_cast<double>(n) / static_cast<double>(flags.size());
}

template <typename T>
double robust_accuracy(SmallResNet<T>& model, const Dataset& data, const ThreatModel& tm,
                       const AttackMember& member, uint64_t seed, int batch_size = 256) {
  return fraction_of(robust_flags(model, data, tm, member, seed, batch_size));
}

// A sample counts as robust only if it is robust to every member.
template <typename T>
std::vector<uint8_t> ensemble_robust_flags(SmallResNet<T>& model, const Dataset& data,
                                           const ThreatModel& tm,
                                           const std::vector<AttackMember>& members,
                                           uint64_t seed, int batch_size = 256,
                                           std::vector<double>* per_member = nullptr) {
  if (members.empty()) throw std::invalid_argument("ensemble_robust_flags: no members");
  std::vector<uint8_t> acc(static_cast<size_t>(data.size()), 1);
  if (per_member) per_member->clear();
  for (const AttackMember& m : members) {
    std::vector<uint8_t> f = robust_flags(model, data, tm, m, seed, batch_size);
    if (per_member) per_member->push_back(fraction_of(f));
    for (size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] & f[i];
  }
  return acc;
}

template <typename T>
double ensemble_robust_accuracy(SmallResNet<T>& model, const Dataset& data, const ThreatModel& tm,
                                const std::vector<AttackMember>& members, uint64_t seed,
                                int batch_size = 256, std::vector<double>* per_member = nullptr) {
  return fraction_of(ensemble_robust_flags(model, data, tm, members, seed, batch_size, per_member));
}

// ------------------------------------------------------ masking diagnostics --
struct MaskingReport {
  std::vector<double> eps_grid;
  std::vector<double> pgd7_acc;   // PGD-7 accuracy per eps, worst case over restarts
  std::vector<double> fgsm_loss;  // mean CE loss at the FGSM point per eps
  double loss_r2 = 0;             // linear-fit R^2 of fgsm_loss against eps
  double acc_at_max_eps = 0;
  bool flag_residual_accuracy = false;  // accuracy at largest eps > 2%
  bool flag_nonlinear_loss = false;     // R^2 < 0.9
};

namespace eval_detail {

inline double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  if (n < 2) return 1.0;
  double sx = 0, sy = 0;
  for (size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy <= 0) return 1.0;
  if (sxx <= 0) return 0.0;
  const double b = sxy / sxx;
  double res = 0;
  for (size_t i = 0; i < n; ++i) {
    const double e = y[i] - (my + b * (x[i] - mx));
    res += e * e;
  }
  return 1.0 - res / syy;
}

}  // namespace eval_detail

template <typename T>
MaskingReport masking_report(SmallResNet<T>& model, const Dataset& data,
                             const std::vector<double>& eps_grid, uint64_t seed,
                             int batch_size = 256) {
  for (size_t i = 1; i < eps_grid.size(); ++i)
    if (eps_grid[i] < eps_grid[i - 1])
      throw std::invalid_argument("masking_report: eps grid must be ascending");
  MaskingReport rep;
  rep.eps_grid = eps_grid;
  BatchStream bs(data, batch_size, 0, 0);
  for (size_t gi = 0; gi < eps_grid.size(); ++gi) {
    const double eps = eps_grid[gi];
    ThreatModel tm{NormKind::linf, eps, true};
    int64_t robust = 0;
    double loss_sum = 0;
    for (int bi = 0; bi < bs.n_batches(); ++bi) {
      ImageBatchf bf = bs.get(bi);
      ImageBatch<T> b{bf.x.template cast<T>(), bf.y, bf.n_classes};
      AttackSpec spec;
      spec.loss = AttackLoss::ce;
      spec.steps = 7;
      spec.seed = stream_seed(seed, "mask_pgd", gi, static_cast<uint64_t>(bi));
      Perturbation<T> p = pgd(model, b, tm, spec);
      Tensor<T> xa(b.x.shape);
      for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = b.x.data[i] + p.delta.data[i];
      const Tensor<T>& z = model.forward(xa, NormMode::eval, GradScope::none);
      auto pred = argmax_rows(z);
      for (size_t i = 0; i < pred.size(); ++i) robust += pred[i] == b.y[i];

      Perturbation<T> f = fgsm(model, b, tm);
      for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = b.x.data[i] + f.delta.data[i];
      const Tensor<T>& zf = model.forward(xa, NormMode::eval, GradScope::none);
      for (double l : ce_per_sample(zf, b.y)) loss_sum += l;
    }
    rep.pgd7_acc.push_back(static_cast<double>(robust) / static_cast<double>(data.size()));
    rep.fgsm_loss.push_back(loss_sum / static_cast<double>(data.size()));
  }
  rep.loss_r2 = eval_detail::linear_fit_r2(rep.eps_grid, rep.fgsm_loss);
  rep.acc_at_max_eps = rep.pgd7_acc.empty() ? 0 : rep.pgd7_acc.back();
  rep.flag_residual_accuracy = rep.acc_at_max_eps > 0.02;
  rep.flag_nonlinear_loss = rep.loss_r2 < 0.9;
  return rep;
}

// ------------------------------------------------- contrast-binned gains --
struct ContrastGain {
  int bin_index = 0;
  int64_t n = 0;
  double mean_contrast = 0;
  double model_acc = 0, baseline_acc = 0, gain = 0;
};

struct ContrastReport {
  std::vector<ContrastGain> bins;
  double model_total = 0, baseline_total = 0;
};

// Robust flags are computed once per model over the whole set and aggregated
// per bin, so the bin-weighted accuracies recompose to the totals exactly.
template <typename T>
ContrastReport contrast_subset_eval(SmallResNet<T>& model, SmallResNet<T>& baseline,
                                    const Dataset& data, const ThreatModel& tm,
                                    const AttackMember& member, uint64_t seed, int n_bins = 10,
                                    int batch_size = 256) {
  std::vector<uint8_t> fm = robust_flags(model, data, tm, member, seed, batch_size);
  std::vector<uint8_t> fb = robust_flags(baseline, data, tm, member, seed, batch_size);
  std::vector<ContrastBin> bins = bin_by_contrast(data, n_bins);
  ContrastReport rep;
  int64_t tot_m = 0, tot_b = 0;
  for (const ContrastBin& bin : bins) {
    ContrastGain g;
    g.bin_index = bin.bin_index;
    g.n = static_cast<int64_t>(bin.sample_indices.size());
    g.mean_contrast = bin.mean_contrast;
    int64_t cm = 0, cb = 0;
    for (int64_t idx : bin.sample_indices) {
      cm += fm[static_cast<size_t>(idx)];
      cb += fb[static_cast<size_t>(idx)];
    }
    tot_m += cm;
    tot_b += cb;
    g.model_acc = g.n > 0 ? static_cast<double>(cm) / static_cast<double>(g.n) : 0;
    g.baseline_acc = g.n > 0 ? static_cast<double>(cb) / static_cast<double>(g.n) : 0;
    g.gain = g.model_acc - g.baseline_acc;
    rep.bins.push_back(g);
  }
  rep.model_total = static_cast<double>(tot_m) / static_cast<double>(data.size());
  rep.baseline_total = static_cast<double>(tot_b) / static_cast<double>(data.size());
  return rep;
}

// --------------------------------------------------------------- checksum --
// FNV-1a over the raw bytes of all parameters and buffers; used to assert
// that evaluation leaves a model untouched.
template <typename T>
uint64_t param_checksum(SmallResNet<T>& model) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const Tensor<T>& t) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data.data());
    for (size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& pr : model.params()) mix(*pr.value);
  for (auto& br : model.buffers()) mix(*br.second);
  return h;
}

}  // namespace oaat
