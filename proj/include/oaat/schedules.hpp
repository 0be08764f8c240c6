#pragma once

// Training-run schedules. Everything is a closed-form function of
// (config, epoch) so resumed runs and tests can evaluate any epoch without
// replaying history. Epochs are 1-based.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace oaat {

enum class Variant { oaat, pgd_at, trades, awp_trades };
enum class Phase { standard, oracle_aligned };
enum class EwaUpdate { per_step, per_epoch };

struct TrainConfig {
  Variant variant = Variant::oaat;
  int total_epochs = 110;
  int batch_size = 128;

  double eps_max = 16.0 / 255.0;
  double eps_ref = 24.0 / 255.0;

  // Ramp endpoints. Start values hold until the perturbation budget reaches
  // 3/4 of eps_max; end values are reached at the final epoch.
  double beta_start = 1.5, beta_end = 3.0;
  double alpha_start = 1.0, alpha_end = 0.8;
  double lambda_start = 0.0, lambda_end = 1.0;

  double lr_max = 0.2;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  double ewa_tau = 0.995;
  EwaUpdate ewa_update = EwaUpdate::per_step;

  bool use_awp = true;  // honored by oaat and awp_trades
  double awp_gamma = 0.005;
  double awp_eps_factor = 2.0;  // weight ascent evaluated at x + factor*delta

  int attack_steps_early = 5;
  int attack_steps_late = 10;

  double trades_beta = 6.0;     // fixed regularizer for trades / awp_trades
  double label_smoothing = 0.0;
  bool lpips_on_ewa = true;     // perceptual term uses the EWA shadow weights

  uint64_t seed = 1;
};

struct ScheduleState {
  int epoch = 0;
  double eps_tilde = 0;
  double beta = 0, alpha = 0, lambda = 0;
  double lr = 0;
  Phase phase = Phase::standard;
  int n_attack_steps = 0;
};

inline void check_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 1 || epoch > cfg.total_epochs)
    throw std::invalid_argument("epoch " + std::to_string(epoch) + " outside [1, " +
                                std::to_string(cfg.total_epochs) + "]");
}

inline double epsilon_at(const TrainConfig& cfg, int epoch) {
  check_epoch(cfg, epoch);
  return std::max(cfg.eps_max / 4.0, cfg.eps_max * epoch / cfg.total_epochs);
}

inline Phase phase_at(const TrainConfig& cfg, int epoch) {
  check_epoch(cfg, epoch);
  // eps_tilde >= (3/4) eps_max, decided in integers to dodge rounding.
  return 4 * epoch >= 3 * cfg.total_epochs ? Phase::oracle_aligned : Phase::standard;
}

// First epoch of the ramp span (eps_tilde reaches 3/4 of eps_max).
inline int ramp_start_epoch(const TrainConfig& cfg) { return (3 * cfg.total_epochs + 3) / 4; }

struct Coefficients {
  double beta, alpha, lambda;
};

inline Coefficients coefficients_at(const TrainConfig& cfg, int epoch) {
  check_epoch(cfg, epoch);
  const int e0 = ramp_start_epoch(cfg);
  if (epoch < e0) return {cfg.beta_start, cfg.alpha_start, cfg.lambda_start};
  const double t =
      cfg.total_epochs == e0 ? 1.0 : static_cast<double>(epoch - e0) / (cfg.total_epochs - e0);
  auto lerp = [t](double a, double b) { return a + (b - a) * t; };
  return {lerp(cfg.beta_start, cfg.beta_end), lerp(cfg.alpha_start, cfg.alpha_end),
          lerp(cfg.lambda_start, cfg.lambda_end)};
}

inline double lr_at(const TrainConfig& cfg, int epoch) {
  check_epoch(cfg, epoch);
  constexpr double kPi = 3.14159265358979323846;
  return cfg.lr_max * 0.5 * (1.0 + std::cos(kPi * (epoch - 1) / cfg.total_epochs));
}

inline int n_attack_steps(const TrainConfig& cfg, int epoch) {
  check_epoch(cfg, epoch);
  // eps_tilde still sits at the eps_max/4 floor exactly while 4*epoch <= T.
  return 4 * epoch <= cfg.total_epochs ? cfg.attack_steps_early : cfg.attack_steps_late;
}

inline ScheduleState schedule_at(const TrainConfig& cfg, int epoch) {
  ScheduleState s;
  s.epoch = epoch;
  s.eps_tilde = epsilon_at(cfg, epoch);
  const Coefficients c = coefficients_at(cfg, epoch);
  s.beta = c.beta;
  s.alpha = c.alpha;
  s.lambda = c.lambda;
  s.lr = lr_at(cfg, epoch);
  s.phase = phase_at(cfg, epoch);
  s.n_attack_steps = n_attack_steps(cfg, epoch);
  return s;
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::oaat: return "oaat";
    case Variant::pgd_at: return "pgd_at";
    case Variant::trades: return "trades";
    case Variant::awp_trades: return "awp_trades";
  }
  return "?";
}

}  // namespace oaat
