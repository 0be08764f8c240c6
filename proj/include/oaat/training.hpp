#pragma once

// Adversarial training loop: the oracle-aligned recipe plus the pgd_at,
// trades and awp_trades baselines. One TrainerState owns the model, its EWA
// shadow and the optimizer; per-batch routines generate the perturbation,
// optionally apply the adversarial weight perturbation, accumulate gradients
// of CE(f(x), y) + beta * L_adv, and step. All randomness is derived from
// (config seed, stream, epoch, batch), so a resumed run continues the exact
// sequence of the uninterrupted one.

#include <functional>
#include <string>
#include <vector>

#include "oaat/attacks.hpp"
#include "oaat/io.hpp"
#include "oaat/schedules.hpp"

namespace oaat {

struct LossBreakdown {
  double total = 0;
  double ce_clean = 0;
  double l_adv = 0;
  double beta = 1;
  Phase phase = Phase::standard;
  // 0 = standard, 1 = oracle-sensitive, 2 = oracle-immune
  int branch = 0;
};

template <typename T>
struct TrainerState {
  TrainConfig cfg;
  ModelConfig mcfg;
  SmallResNet<T> model;
  EwaState<T> ewa;
  Sgd<T> opt;
  int epochs_done = 0;
};

template <typename T>
TrainerState<T> make_trainer(const TrainConfig& cfg, const ModelConfig& mcfg) {
  TrainerState<T> s;
  s.cfg = cfg;
  s.mcfg = mcfg;
  s.model.configure(mcfg);
  s.model.init_params(cfg.seed);
  s.ewa = make_ewa(s.model, cfg.ewa_tau);
  s.opt.momentum = cfg.momentum;
  s.opt.weight_decay = cfg.weight_decay;
  return s;
}

// ------------------------------------------------------------------- AWP --
template <typename T>
struct AwpPerturbation {
  std::vector<Tensor<T>> v;  // parallel to model.params(); empty tensors where skipped
  bool applied = false;
};

// Build v from the gradients currently stored in the model: one normalized
// ascent step per parameter tensor, ||v_l|| = gamma * ||theta_l||. Tensors
// whose parameter or gradient norm is zero are skipped.
template <typename T>
AwpPerturbation<T> awp_apply_from_grads(SmallResNet<T>& model, double gamma) {
  AwpPerturbation<T> out;
  auto ps = model.params();
  out.v.resize(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    const double wn = static_cast<double>(ps[i].value->norm());
    const double gn = static_cast<double>(ps[i].grad->norm());
    if (wn == 0 || gn == 0) continue;
    Tensor<T> vi = *ps[i].grad;
    vi *= static_cast<T>(gamma * wn / gn);
    ps[i].value->operator+=(vi);
    out.v[i] = std::move(vi);
  }
  out.applied = true;
  return out;
}

template <typename T>
void awp_remove(SmallResNet<T>& model, AwpPerturbation<T>& awp) {
  if (!awp.applied) return;
  auto ps = model.params();
  for (size_t i = 0; i < ps.size(); ++i)
    if (awp.v[i].numel() > 0) ps[i].value->operator-=(awp.v[i]);
  awp.applied = false;
}

// Weight ascent on the classification loss at x + factor * delta (budget
// doubling is the recipe's default). The forward runs with normalization in
// inference mode, so running statistics are untouched; gamma = 0 performs no
// pass at all, which keeps the reduction to a plain step bit-exact.
template <typename T>
AwpPerturbation<T> awp_step(SmallResNet<T>& model, const ImageBatch<T>& batch,
                            const Tensor<T>& delta, double gamma, double factor = 2.0,
                            double label_smoothing = 0.0) {
  if (gamma == 0) return {};
  Tensor<T> xa(batch.x.shape);
  for (size_t i = 0; i < xa.data.size(); ++i)
    xa.data[i] = std::clamp(batch.x.data[i] + static_cast<T>(factor) * delta.data[i], T(0), T(1));
  model.zero_grad();
  const Tensor<T>& z = model.forward(xa, NormMode::eval, GradScope::full);
  LossGrad<T> lg = ce_with_grad(z, batch.y, label_smoothing);
  model.backward(lg.dlogits, GradScope::full);
  return awp_apply_from_grads(model, gamma);
}

// --------------------------------------------------------- loss assembly --
namespace train_detail {

// Accumulates gradients of CE(f(x), y) + beta * KL(f(x+delta) || target)
// into the model. The target is the constant convex combination
// alpha * f(x) + (1 - alpha) * p_ref, where f(x) is the clean prediction of
// this very forward pass; pass an empty p_ref (any alpha) to use f(x) alone.
template <typename T>
LossBreakdown adv_training_loss(SmallResNet<T>& model, const ImageBatch<T>& batch,
                                const Tensor<T>& delta, const Tensor<T>& p_ref, double alpha,
                                double beta, double label_smoothing) {
  LossBreakdown out;
  out.beta = beta;

  const Tensor<T>& zc = model.forward(batch.x, NormMode::train, GradScope::full);
  LossGrad<T> ce = ce_with_grad(zc, batch.y, label_smoothing);
  Tensor<T> target = softmax_rows(zc);
  if (p_ref.numel() > 0)
    for (size_t i = 0; i < target.data.size(); ++i)
      target.data[i] = static_cast<T>(alpha) * target.data[i] +
                       static_cast<T>(1.0 - alpha) * p_ref.data[i];
  model.backward(ce.dlogits, GradScope::full);

  Tensor<T> xa(batch.x.shape);
  for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = batch.x.data[i] + delta.data[i];
  const Tensor<T>& za = model.forward(xa, NormMode::train, GradScope::full);
  LossGrad<T> kl = kl_const_target(za, target);
  kl.dlogits *= static_cast<T>(beta);
  model.backward(kl.dlogits, GradScope::full);

  out.ce_clean = ce.value;
  out.l_adv = kl.value;
  out.total = ce.value + beta * kl.value;
  return out;
}

// CE on adversarial examples only (the pgd_at objective).
template <typename T>
LossBreakdown adv_only_loss(SmallResNet<T>& model, const ImageBatch<T>& batch,
                            const Tensor<T>& delta, double label_smoothing) {
  LossBreakdown out;
  Tensor<T> xa(batch.x.shape);
  for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = batch.x.data[i] + delta.data[i];
  const Tensor<T>& za = model.forward(xa, NormMode::train, GradScope::full);
  LossGrad<T> ce = ce_with_grad(za, batch.y, label_smoothing);
  model.backward(ce.dlogits, GradScope::full);
  out.ce_clean = 0;
  out.l_adv = ce.value;
  out.beta = 1;
  out.total = ce.value;
  return out;
}

}  // namespace train_detail

// ------------------------------------------------------------ oaat batch --
// One oracle-aligned training step on one batch: branch selection, attack
// generation, optional AWP, gradient accumulation, optimizer step, EWA.
template <typename T>
LossBreakdown oaat_batch(TrainerState<T>& S, const ImageBatch<T>& batch,
                         const ScheduleState& sched, uint64_t epoch, int batch_index) {
  const TrainConfig& cfg = S.cfg;
  const double r_init = std::min(sched.eps_tilde, cfg.eps_max / 4.0);
  const uint64_t atk_seed = stream_seed(cfg.seed, "attack", epoch, static_cast<uint64_t>(batch_index));

  LossBreakdown bd;
  bd.phase = sched.phase;
  Tensor<T> delta_tilde;
  Tensor<T> p_ref;  // empty -> target is the clean prediction alone

  if (sched.phase == Phase::standard) {
    bd.branch = 0;
    AttackSpec spec;
    spec.loss = AttackLoss::ce;
    spec.steps = sched.n_attack_steps;
    spec.init = AttackInit::uniform;
    spec.init_radius = r_init;
    spec.seed = atk_seed;
    ThreatModel tm{NormKind::linf, sched.eps_tilde, true};
    delta_tilde = pgd(S.model, batch, tm, spec).delta;
  } else if (batch_index % 2 == 0) {
    // oracle-sensitive branch: attack at the reference budget, project back
    bd.branch = 1;
    AttackSpec spec;
    spec.loss = AttackLoss::ce;
    spec.steps = sched.n_attack_steps;
    spec.init = AttackInit::uniform;
    spec.init_radius = r_init;
    spec.seed = atk_seed;
    OsAttackResult<T> os = os_attack(S.model, batch, cfg.eps_ref, sched.eps_tilde, spec);
    delta_tilde = std::move(os.delta_tilde);
    // reference prediction f(x + delta_hat) for the convex-combination target
    Tensor<T> xr(batch.x.shape);
    for (size_t i = 0; i < xr.data.size(); ++i) xr.data[i] = batch.x.data[i] + os.delta_hat.data[i];
    p_ref = softmax_rows(S.model.forward(xr, NormMode::eval, GradScope::none));
  } else {
    // oracle-immune branch: fresh full-budget noise, perceptually-penalized attack
    bd.branch = 2;
    AttackSpec spec;
    spec.loss = AttackLoss::ce_minus_lpips;
    spec.lambda = sched.lambda;
    spec.steps = sched.n_attack_steps;
    spec.init = AttackInit::uniform;
    spec.init_radius = sched.eps_tilde;
    spec.seed = stream_seed(cfg.seed, "attack_oi", epoch, static_cast<uint64_t>(batch_index));
    ThreatModel tm{NormKind::linf, sched.eps_tilde, true};
    AttackNets<T> nets;
    nets.model = &S.model;
    LpipsContext<T> ctx{cfg.lpips_on_ewa ? &S.ewa.shadow : &S.model};
    nets.lpips = &ctx;
    delta_tilde = pgd(nets, batch, tm, spec).delta;
  }

  AwpPerturbation<T> awp;
  if (cfg.use_awp && cfg.awp_gamma > 0)
    awp = awp_step(S.model, batch, delta_tilde, cfg.awp_gamma, cfg.awp_eps_factor,
                   cfg.label_smoothing);

  S.model.zero_grad();
  LossBreakdown loss = train_detail::adv_training_loss(S.model, batch, delta_tilde, p_ref,
                                                       sched.alpha, sched.beta,
                                                       cfg.label_smoothing);
  loss.phase = bd.phase;
  loss.branch = bd.branch;
  awp_remove(S.model, awp);
  auto ps = S.model.params();
  S.opt.step(ps, sched.lr);
  if (cfg.ewa_update == EwaUpdate::per_step) ewa_update(S.ewa, S.model);

  if (!std::isfinite(loss.total))
    throw NumericError("training loss became non-finite", batch_index);
  return loss;
}

// ------------------------------------------------------- baseline batches --
template <typename T>
LossBreakdown baseline_batch(TrainerState<T>& S, const ImageBatch<T>& batch,
                             const ScheduleState& sched, uint64_t epoch, int batch_index) {
  const TrainConfig& cfg = S.cfg;
  const uint64_t atk_seed = stream_seed(cfg.seed, "attack", epoch, static_cast<uint64_t>(batch_index));
  ThreatModel tm{NormKind::linf, cfg.eps_max, true};
  AttackSpec spec;
  spec.steps = cfg.attack_steps_late;
  spec.init = AttackInit::uniform;
  spec.seed = atk_seed;

  LossBreakdown loss;
  if (cfg.variant == Variant::pgd_at) {
    spec.loss = AttackLoss::ce;
    Tensor<T> delta = pgd(S.model, batch, tm, spec).delta;
    S.model.zero_grad();
    loss = train_detail::adv_only_loss(S.model, batch, delta, cfg.label_smoothing);
  } else {
    spec.loss = AttackLoss::kl;
    Tensor<T> delta = pgd(S.model, batch, tm, spec).delta;
    AwpPerturbation<T> awp;
    if (cfg.variant == Variant::awp_trades && cfg.use_awp && cfg.awp_gamma > 0)
      awp = awp_step(S.model, batch, delta, cfg.awp_gamma, 1.0, cfg.label_smoothing);
    S.model.zero_grad();
    loss = train_detail::adv_training_loss(S.model, batch, delta, Tensor<T>(), 1.0,
                                           cfg.trades_beta, cfg.label_smoothing);
    awp_remove(S.model, awp);
  }
  auto ps = S.model.params();
  S.opt.step(ps, sched.lr);
  if (cfg.ewa_update == EwaUpdate::per_step) ewa_update(S.ewa, S.model);
  if (!std::isfinite(loss.total))
    throw NumericError("training loss became non-finite", batch_index);
  return loss;
}

// ------------------------------------------------------------- train loop --
struct EpochRecord {
  int epoch = 0;
  double lr = 0, eps_tilde = 0, beta = 0, alpha = 0, lambda = 0;
  double loss_total = 0, loss_ce = 0, loss_adv = 0;
  double val_clean = -1, val_robust = -1;
  int n_std = 0, n_os = 0, n_oi = 0;
};

template <typename T>
struct TrainHooks {
  std::function<void(TrainerState<T>&, const EpochRecord&)> after_epoch;
};

template <typename T>
double clean_accuracy(SmallResNet<T>& model, const Dataset& data, int batch_size = 256) {
  if (data.size() == 0) return -1;
  BatchStream bs(data, batch_size, 0, 0);
  int64_t ok = 0;
  for (int bi = 0; bi < bs.n_batches(); ++bi) {
    ImageBatchf bf = bs.get(bi);
    Tensor<T> x = bf.x.template cast<T>();
    const Tensor<T>& z = model.forward(x, NormMode::eval, GradScope::none);
    auto pred = argmax_rows(z);
    for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == bf.y[i];
  }
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

template <typename T>
double pgd_accuracy(SmallResNet<T>& model, const Dataset& data, double eps, int steps,
                    uint64_t seed, int batch_size = 256) {
  if (data.size() == 0) return -1;
  BatchStream bs(data, batch_size, 0, 0);
  ThreatModel tm{NormKind::linf, eps, true};
  int64_t ok = 0;
  for (int bi = 0; bi < bs.n_batches(); ++bi) {
    ImageBatchf bf = bs.get(bi);
    ImageBatch<T> b{bf.x.template cast<T>(), bf.y, bf.n_classes};
    AttackSpec spec;
    spec.loss = AttackLoss::ce;
    spec.steps = steps;
    spec.seed = stream_seed(seed, "eval_pgd", static_cast<uint64_t>(bi));
    Perturbation<T> p = pgd(model, b, tm, spec);
    Tensor<T> xa(b.x.shape);
    for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = b.x.data[i] + p.delta.data[i];
    const Tensor<T>& z = model.forward(xa, NormMode::eval, GradScope::none);
    auto pred = argmax_rows(z);
    for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == b.y[i];
  }
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

// Runs epochs epochs_done+1 .. total_epochs. The hook fires after each epoch
// (checkpointing, metrics). Batches are shuffled per epoch; augmentation and
// attacks draw from per-(epoch, batch) streams.
template <typename T>
void train_epochs(TrainerState<T>& S, const DataSplits& data, const TrainHooks<T>& hooks = {},
                  bool validate = true, const AugmentOptions& aug = {}) {
  const TrainConfig& cfg = S.cfg;
  for (int epoch = S.epochs_done + 1; epoch <= cfg.total_epochs; ++epoch) {
    const ScheduleState sched = schedule_at(cfg, epoch);
    BatchStream bs(data.train, cfg.batch_size, cfg.seed, static_cast<uint64_t>(epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr;
    rec.eps_tilde = sched.eps_tilde;
    rec.beta = sched.beta;
    rec.alpha = sched.alpha;
    rec.lambda = sched.lambda;
    const int nb = bs.n_batches();
    for (int bi = 0; bi < nb; ++bi) {
      ImageBatchf bf = bs.get(bi);
      augment(bf, stream_seed(cfg.seed, "aug", static_cast<uint64_t>(epoch),
                              static_cast<uint64_t>(bi)),
              aug);
      ImageBatch<T> b{bf.x.template cast<T>(), bf.y, bf.n_classes};
      LossBreakdown bd = cfg.variant == Variant::oaat
                             ? oaat_batch(S, b, sched, static_cast<uint64_t>(epoch), bi)
                             : baseline_batch(S, b, sched, static_cast<uint64_t>(epoch), bi);
      rec.loss_total += bd.total;
      rec.loss_ce += bd.ce_clean;
      rec.loss_adv += bd.l_adv;
      (bd.branch == 0 ? rec.n_std : bd.branch == 1 ? rec.n_os : rec.n_oi) += 1;
    }
    rec.loss_total /= nb;
    rec.loss_ce /= nb;
    rec.loss_adv /= nb;
    if (cfg.ewa_update == EwaUpdate::per_epoch) ewa_update(S.ewa, S.model);
    if (validate && data.val.size() > 0) {
      rec.val_clean = clean_accuracy(S.model, data.val);
      rec.val_robust = pgd_accuracy(S.model, data.val, cfg.eps_max, 7,
                                    stream_seed(cfg.seed, "val", static_cast<uint64_t>(epoch)));
    }
    S.epochs_done = epoch;
    if (hooks.after_epoch) hooks.after_epoch(S, rec);
  }
}

// ----------------------------------------------------------- checkpoints --
template <typename T>
void save_checkpoint(const std::string& path, TrainerState<T>& S,
                     const std::string& config_hash) {
  Container c;
  c.meta["format"] = "oaat-checkpoint-v1";
  c.meta["epoch"] = std::to_string(S.epochs_done);
  c.meta["config_hash"] = config_hash;
  c.meta["variant"] = variant_name(S.cfg.variant);
  c.meta["ewa_updates"] = std::to_string(S.ewa.updates);
  c.meta["widths"] = std::to_string(S.mcfg.widths[0]) + "," + std::to_string(S.mcfg.widths[1]) +
                     "," + std::to_string(S.mcfg.widths[2]);
  c.meta["n_classes"] = std::to_string(S.mcfg.n_classes);
  c.meta["in_ch"] = std::to_string(S.mcfg.in_ch);
  c.meta["stem_stride"] = std::to_string(S.mcfg.stem_stride);
  for (auto& p : S.model.params()) c.tensors["model/" + p.name] = p.value->template cast<float>();
  for (auto& b : S.model.buffers())
    c.tensors["model_buf/" + b.first] = b.second->template cast<float>();
  for (auto& p : S.ewa.shadow.params())
    c.tensors["ewa/" + p.name] = p.value->template cast<float>();
  for (auto& b : S.ewa.shadow.buffers())
    c.tensors["ewa_buf/" + b.first] = b.second->template cast<float>();
  auto ps = S.model.params();
  if (S.opt.m.size() == ps.size())
    for (size_t i = 0; i < ps.size(); ++i)
      c.tensors["opt/m/" + ps[i].name] = S.opt.m[i].template cast<float>();
  save_container(path, c);
}

// Restores model, EWA shadow and optimizer state; returns the stored epoch.
template <typename T>
int load_checkpoint(const std::string& path, TrainerState<T>& S) {
  Container c = load_container(path);
  if (c.meta.count("format") == 0 || c.meta["format"] != "oaat-checkpoint-v1")
    throw std::runtime_error(path + ": not a checkpoint container");
  auto fetch = [&](const std::string& name) -> const Tensorf& {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw std::runtime_error(path + ": missing tensor " + name);
    return it->second;
  };
  for (auto& p : S.model.params()) *p.value = fetch("model/" + p.name).template cast<T>();
  for (auto& b : S.model.buffers()) *b.second = fetch("model_buf/" + b.first).template cast<T>();
  for (auto& p : S.ewa.shadow.params()) *p.value = fetch("ewa/" + p.name).template cast<T>();
  for (auto& b : S.ewa.shadow.buffers())
    *b.second = fetch("ewa_buf/" + b.first).template cast<T>();
  auto ps = S.model.params();
  if (c.tensors.count("opt/m/" + ps[0].name)) {
    S.opt.m.clear();
    for (auto& p : ps) S.opt.m.push_back(fetch("opt/m/" + p.name).template cast<T>());
  }
  S.ewa.updates = c.meta.count("ewa_updates") ? std::stoll(c.meta["ewa_updates"]) : 0;
  S.epochs_done = std::stoi(c.meta["epoch"]);
  return S.epochs_done;
}

// Reads just the model (or its EWA shadow) out of a checkpoint for evaluation.
template <typename T>
SmallResNet<T> load_model_from_checkpoint(const std::string& path, bool ewa_weights = false) {
  Container c = load_container(path);
  ModelConfig mc;
  if (c.meta.count("widths")) {
    std::sscanf(c.meta["widths"].c_str(), "%d,%d,%d", &mc.widths[0], &mc.widths[1], &mc.widths[2]);
    mc.n_classes = std::stoi(c.meta["n_classes"]);
    mc.in_ch = std::stoi(c.meta["in_ch"]);
    mc.stem_stride = std::stoi(c.meta["stem_stride"]);
  }
  SmallResNet<T> net;
  net.configure(mc);
  const std::string pp = ewa_weights ? "ewa/" : "model/";
  const std::string bp = ewa_weights ? "ewa_buf/" : "model_buf/";
  for (auto& p : net.params()) {
    auto it = c.tensors.find(pp + p.name);
    if (it == c.tensors.end()) throw std::runtime_error(path + ": missing tensor " + pp + p.name);
    *p.value = it->second.template cast<T>();
  }
  for (auto& b : net.buffers()) {
    auto it = c.tensors.find(bp + b.first);
    if (it == c.tensors.end()) throw std::runtime_error(path + ": missing tensor " + bp + b.first);
    *b.second = it->second.template cast<T>();
  }
  return net;
}

}  // namespace oaat
