#pragma once

// Flat sectioned key=value config files. Lines are `key = value` under a
// `[section]` header; blank lines and lines starting with '#' are ignored.
// Numeric values accept plain decimals or pixel fractions like "16/255".
// Parsing never throws on bad input: every problem (unknown key, malformed
// line, out-of-range value) is collected into the violations list so a run
// can report all of them at once. The config hash is FNV-1a-64 over the raw
// file bytes.

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "oaat/data.hpp"
#include "oaat/model.hpp"
#include "oaat/schedules.hpp"

namespace oaat {

struct EvalConfig {
  double eps = 16.0 / 255.0;
  int pgd_steps = 50;
  int square_queries = 500;
  int n_bins = 10;
  bool use_ewa = false;  // evaluate the EWA shadow instead of the live weights
  std::vector<double> masking_grid;  // empty -> {0, 1x, 2x, 4x} of eps
};

struct FullConfig {
  std::string run_id;  // optional; CLI derives one when empty
  uint64_t seed = 1;

  DatasetSpec data;
  AugmentOptions aug;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  // attack subcommand defaults
  std::string attack_kind = "pgd";
  std::string attack_loss = "ce";
  std::string attack_norm = "linf";
  double attack_eps = 8.0 / 255.0;
  int attack_steps = 50;
  double attack_step_size = -1;
  double attack_lambda = 1.0;
  double attack_rfgsm_noise = -1;
  int attack_queries = 500;
};

struct ParsedConfig {
  FullConfig cfg;
  std::vector<std::string> violations;
  std::string raw;
  uint64_t hash = 0;

  bool ok() const { return violations.empty(); }
};

inline uint64_t config_hash_bytes(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace config_detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct Ctx {
  ParsedConfig* out;
  std::string section;
  int line_no = 0;

  void violation(const std::string& msg) {
    out->violations.push_back("line " + std::to_string(line_no) + ": " + msg);
  }
};

inline bool parse_real(const std::string& v, double& out) {
  const size_t slash = v.find('/');
  try {
    size_t used = 0;
    if (slash != std::string::npos) {
      const double num = std::stod(v.substr(0, slash), &used);
      if (config_detail::trim(v.substr(0, slash)).size() != used) return false;
      size_t used2 = 0;
      const double den = std::stod(v.substr(slash + 1), &used2);
      if (config_detail::trim(v.substr(slash + 1)).size() != used2 || den == 0) return false;
      out = num / den;
      return true;
    }
    out = std::stod(v, &used);
    return used == v.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_int(const std::string& v, int& out) {
  try {
    size_t used = 0;
    out = std::stoi(v, &used);
    return used == v.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_u64(const std::string& v, uint64_t& out) {
  if (!v.empty() && v[0] == '-') return false;  // stoull would wrap silently
  try {
    size_t used = 0;
    out = std::stoull(v, &used);
    return used == v.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
    return true;
  }
  if (v == "false" || v == "0") {
    out = false;
    return true;
  }
  return false;
}

}  // namespace config_detail

// Parses and validates; never throws on content errors.
inline ParsedConfig parse_config_text(const std::string& text) {
  using namespace config_detail;
  ParsedConfig pc;
  pc.raw = text;
  pc.hash = config_hash_bytes(text);
  FullConfig& c = pc.cfg;
  Ctx ctx{&pc, "", 0};

  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++ctx.line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        ctx.violation("malformed section header '" + t + "'");
        continue;
      }
      ctx.section = t.substr(1, t.size() - 2);
      if (ctx.section != "run" && ctx.section != "data" && ctx.section != "model" &&
          ctx.section != "train" && ctx.section != "attack" && ctx.section != "eval")
        ctx.violation("unknown section [" + ctx.section + "]");
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      ctx.violation("expected key = value, got '" + t + "'");
      continue;
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty()) {
      ctx.violation("empty key");
      continue;
    }

    auto real_into = [&](double& dst) {
      if (!parse_real(val, dst)) ctx.violation(key + ": cannot parse real '" + val + "'");
    };
    auto int_into = [&](int& dst) {
      if (!parse_int(val, dst)) ctx.violation(key + ": cannot parse integer '" + val + "'");
    };
    auto bool_into = [&](bool& dst) {
      if (!parse_bool(val, dst)) ctx.violation(key + ": cannot parse bool '" + val + "'");
    };

    bool known = true;
    if (ctx.section == "run") {
      if (key == "seed") {
        uint64_t s;
        if (parse_u64(val, s)) {
          c.seed = s;
          c.train.seed = s;
          c.data.seed = s;
        } else
          ctx.violation("seed: cannot parse '" + val + "'");
      } else if (key == "run_id")
        c.run_id = val;
      else
        known = false;
    } else if (ctx.section == "data") {
      if (key == "source") {
        if (val == "cifar10_binary")
          c.data.source = DataSource::cifar10_binary;
        else if (val == "image_folder")
          c.data.source = DataSource::image_folder;
        else if (val == "synthetic")
          c.data.source = DataSource::synthetic;
        else
          ctx.violation("source: unknown value '" + val + "'");
      } else if (key == "root")
        c.data.root_path = val;
      else if (key == "n_train") {
        int n;
        if (parse_int(val, n))
          c.data.n_train = n;
        else
          ctx.violation("n_train: cannot parse '" + val + "'");
      } else if (key == "n_val") {
        int n;
        if (parse_int(val, n))
          c.data.n_val = n;
        else
          ctx.violation("n_val: cannot parse '" + val + "'");
      } else if (key == "class_balanced_val")
        bool_into(c.data.class_balanced_val);
      else if (key == "synth_n_test") {
        int n;
        if (parse_int(val, n))
          c.data.synth_n_test = n;
        else
          ctx.violation("synth_n_test: cannot parse '" + val + "'");
      } else if (key == "synth_classes")
        int_into(c.data.synth_classes);
      else if (key == "synth_hw")
        int_into(c.data.synth_hw);
      else if (key == "aug_pad")
        int_into(c.aug.pad);
      else if (key == "aug_flip_prob")
        real_into(c.aug.flip_prob);
      else
        known = false;
    } else if (ctx.section == "model") {
      if (key == "widths") {
        int a, b, d;
        if (std::sscanf(val.c_str(), "%d,%d,%d", &a, &b, &d) == 3) {
          c.model.widths = {a, b, d};
        } else
          ctx.violation("widths: expected three comma-separated integers, got '" + val + "'");
      } else if (key == "n_classes")
        int_into(c.model.n_classes);
      else if (key == "in_ch")
        int_into(c.model.in_ch);
      else if (key == "stem_stride")
        int_into(c.model.stem_stride);
      else
        known = false;
    } else if (ctx.section == "train") {
      TrainConfig& tc = c.train;
      if (key == "variant") {
        if (val == "oaat")
          tc.variant = Variant::oaat;
        else if (val == "pgd_at")
          tc.variant = Variant::pgd_at;
        else if (val == "trades")
          tc.variant = Variant::trades;
        else if (val == "awp_trades")
          tc.variant = Variant::awp_trades;
        else
          ctx.violation("variant: unknown value '" + val + "'");
      } else if (key == "total_epochs")
        int_into(tc.total_epochs);
      else if (key == "batch_size")
        int_into(tc.batch_size);
      else if (key == "eps_max")
        real_into(tc.eps_max);
      else if (key == "eps_ref")
        real_into(tc.eps_ref);
      else if (key == "beta_start")
        real_into(tc.beta_start);
      else if (key == "beta_end")
        real_into(tc.beta_end);
      else if (key == "alpha_start")
        real_into(tc.alpha_start);
      else if (key == "alpha_end")
        real_into(tc.alpha_end);
      else if (key == "lambda_start")
        real_into(tc.lambda_start);
      else if (key == "lambda_end")
        real_into(tc.lambda_end);
      else if (key == "lr_max")
        real_into(tc.lr_max);
      else if (key == "momentum")
        real_into(tc.momentum);
      else if (key == "weight_decay")
        real_into(tc.weight_decay);
      else if (key == "ewa_tau")
        real_into(tc.ewa_tau);
      else if (key == "ewa_update") {
        if (val == "per_step")
          tc.ewa_update = EwaUpdate::per_step;
        else if (val == "per_epoch")
          tc.ewa_update = EwaUpdate::per_epoch;
        else
          ctx.violation("ewa_update: unknown value '" + val + "'");
      } else if (key == "use_awp")
        bool_into(tc.use_awp);
      else if (key == "awp_gamma")
        real_into(tc.awp_gamma);
      else if (key == "awp_eps_factor")
        real_into(tc.awp_eps_factor);
      else if (key == "attack_steps_early")
        int_into(tc.attack_steps_early);
      else if (key == "attack_steps_late")
        int_into(tc.attack_steps_late);
      else if (key == "trades_beta")
        real_into(tc.trades_beta);
      else if (key == "label_smoothing")
        real_into(tc.label_smoothing);
      else if (key == "lpips_on_ewa")
        bool_into(tc.lpips_on_ewa);
      else
        known = false;
    } else if (ctx.section == "attack") {
      if (key == "kind") {
        if (val == "pgd" || val == "fgsm" || val == "rfgsm" || val == "square")
          c.attack_kind = val;
        else
          ctx.violation("kind: unknown value '" + val + "'");
      } else if (key == "loss") {
        if (val == "ce" || val == "kl" || val == "ce_minus_lpips" || val == "ce_minus_disc")
          c.attack_loss = val;
        else
          ctx.violation("loss: unknown value '" + val + "'");
      } else if (key == "norm") {
        if (val == "linf" || val == "l2")
          c.attack_norm = val;
        else
          ctx.violation("norm: unknown value '" + val + "'");
      } else if (key == "eps")
        real_into(c.attack_eps);
      else if (key == "steps")
        int_into(c.attack_steps);
      else if (key == "step_size")
        real_into(c.attack_step_size);
      else if (key == "lambda")
        real_into(c.attack_lambda);
      else if (key == "rfgsm_noise")
        real_into(c.attack_rfgsm_noise);
      else if (key == "queries")
        int_into(c.attack_queries);
      else
        known = false;
    } else if (ctx.section == "eval") {
      if (key == "eps")
        real_into(c.eval.eps);
      else if (key == "pgd_steps")
        int_into(c.eval.pgd_steps);
      else if (key == "square_queries")
        int_into(c.eval.square_queries);
      else if (key == "n_bins")
        int_into(c.eval.n_bins);
      else if (key == "use_ewa")
        bool_into(c.eval.use_ewa);
      else if (key == "masking_grid") {
        c.eval.masking_grid.clear();
        std::istringstream gs(val);
        std::string item;
        while (std::getline(gs, item, ',')) {
          double e;
          if (!parse_real(trim(item), e)) {
            ctx.violation("masking_grid: cannot parse '" + trim(item) + "'");
            break;
          }
          c.eval.masking_grid.push_back(e);
        }
      } else
        known = false;
    } else {
      known = false;  // key outside any recognized section
    }
    if (!known)
      ctx.violation("unknown key '" + key + "' in section [" + ctx.section + "]");
  }

  // semantic checks, collected rather than thrown
  auto bad = [&](const std::string& m) { pc.violations.push_back("config: " + m); };
  const TrainConfig& tc = c.train;
  if (tc.total_epochs < 1) bad("train.total_epochs must be >= 1");
  if (tc.batch_size < 1) bad("train.batch_size must be >= 1");
  if (tc.eps_max < 0 || tc.eps_max > 1) bad("train.eps_max must lie in [0, 1]");
  if (tc.eps_ref < tc.eps_max) bad("train.eps_ref must be >= train.eps_max");
  if (tc.lr_max <= 0) bad("train.lr_max must be positive");
  if (tc.momentum < 0 || tc.momentum >= 1) bad("train.momentum must lie in [0, 1)");
  if (tc.ewa_tau < 0 || tc.ewa_tau >= 1) bad("train.ewa_tau must lie in [0, 1)");
  if (tc.awp_gamma < 0) bad("train.awp_gamma must be >= 0");
  if (tc.attack_steps_early < 1 || tc.attack_steps_late < 1)
    bad("train.attack_steps_* must be >= 1");
  if (tc.label_smoothing < 0 || tc.label_smoothing >= 1)
    bad("train.label_smoothing must lie in [0, 1)");
  if (c.model.widths[0] < 1 || c.model.widths[1] < 1 || c.model.widths[2] < 1)
    bad("model.widths must be positive");
  if (c.model.n_classes < 2) bad("model.n_classes must be >= 2");
  if (c.model.stem_stride != 1 && c.model.stem_stride != 2)
    bad("model.stem_stride must be 1 or 2");
  if (c.data.n_val < 0) bad("data.n_val must be >= 0");
  if (c.data.n_train < 0) bad("data.n_train must be >= 0");
  if (c.data.source != DataSource::synthetic && c.data.root_path.empty())
    bad("data.root is required unless data.source = synthetic");
  if (c.aug.pad < 0) bad("data.aug_pad must be >= 0");
  if (c.aug.flip_prob < 0 || c.aug.flip_prob > 1) bad("data.aug_flip_prob must lie in [0, 1]");
  if (c.attack_eps < 0 || c.attack_eps > 1) bad("attack.eps must lie in [0, 1]");
  if (c.attack_steps < 1) bad("attack.steps must be >= 1");
  if (c.attack_queries < 1) bad("attack.queries must be >= 1");
  if (c.eval.eps < 0 || c.eval.eps > 1) bad("eval.eps must lie in [0, 1]");
  if (c.eval.pgd_steps < 1) bad("eval.pgd_steps must be >= 1");
  if (c.eval.square_queries < 1) bad("eval.square_queries must be >= 1");
  if (c.eval.n_bins < 1) bad("eval.n_bins must be >= 1");
  for (size_t i = 1; i < c.eval.masking_grid.size(); ++i)
    if (c.eval.masking_grid[i] < c.eval.masking_grid[i - 1]) {
      bad("eval.masking_grid must be ascending");
      break;
    }
  return pc;
}

// Reads the file; a missing file is reported as a violation so the caller
// can route it to the config-error exit path.
inline ParsedConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    ParsedConfig pc;
    pc.violations.push_back("config: cannot open file '" + path + "'");
    return pc;
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace oaat
