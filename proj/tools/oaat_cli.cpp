// Single entry-point binary: train / eval / attack / theory / contrast /
// plotdata. Every run writes into its own directory under the run root
// (--out, else $OAAT_RUN_ROOT, else ./runs): a manifest.json, a copy of the
// config, and the subcommand's artifacts. Manifests are append-only and
// artifact files are never overwritten; repeated runs pick fresh names.
//
// Exit codes: 0 success, 2 usage error, 3 config/validation error,
// 4 numeric failure during a run, 1 anything else.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oaat/config.hpp"
#include "oaat/contrast.hpp"
#include "oaat/evaluation.hpp"
#include "oaat/theory.hpp"
#include "oaat/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oaat;

namespace {

constexpr const char* kUsage = R"(usage: oaat <command> [options]

commands:
  train      train a model per the experiment config
  eval       evaluate a checkpoint: clean, attack ensemble, masking, contrast
  attack     generate adversarial examples from a checkpoint
  theory     closed-form vs Monte-Carlo tables for the synthetic distribution
  contrast   per-image contrast scores and bin assignments
  plotdata   tidy CSV series (schedules, masking, robustness, contrast)

common options:
  --config PATH        experiment config file
  --out DIR            run root (default: $OAAT_RUN_ROOT, else ./runs)
  --run-id NAME        run directory name (default: derived)
  --seed N             override the config seed
  --device NAME        compute device; only "cpu" is available

train:    --variant oaat|pgd_at|trades|awp_trades   --resume RUN_ID
eval:     --checkpoint PATH  [--baseline-checkpoint PATH]  [--use-ewa true|false]
attack:   --checkpoint PATH
plotdata: [--checkpoint PATH]  [--baseline-checkpoint PATH]
theory:   --p V  --alpha V  --d N  [--eps V]  [--n-mc N]  [--erm-n N]
)";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigExit : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::map<std::string, std::string> kv;

  bool has(const std::string& k) const { return kv.count(k) > 0; }
  std::string get(const std::string& k, const std::string& def = "") const {
    auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  }
  double real(const std::string& k, double def) const {
    if (!has(k)) return def;
    double v;
    if (!config_detail::parse_real(kv.at(k), v))
      throw UsageError("flag --" + k + ": cannot parse number '" + kv.at(k) + "'");
    return v;
  }
  int64_t integer(const std::string& k, int64_t def) const {
    if (!has(k)) return def;
    try {
      return std::stoll(kv.at(k));
    } catch (...) {
      throw UsageError("flag --" + k + ": cannot parse integer '" + kv.at(k) + "'");
    }
  }
};

Flags parse_flags(int argc, char** argv, const std::set<std::string>& allowed) {
  Flags f;
  for (int i = 2; i < argc; ++i) {
    std::string tok = argv[i];
    if (tok.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2);
    if (!allowed.count(key)) throw UsageError("unknown flag --" + key);
    if (i + 1 >= argc) throw UsageError("flag --" + key + " needs a value");
    f.kv[key] = argv[++i];
  }
  if (f.has("device") && f.get("device") != "cpu")
    throw UsageError("unknown device '" + f.get("device") + "' (only \"cpu\" is available)");
  return f;
}

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// ------------------------------------------------------------- run layout --
std::string run_root(const Flags& f) {
  if (f.has("out")) return f.get("out");
  if (const char* env = std::getenv("OAAT_RUN_ROOT")) return env;
  return "runs";
}

std::string sanitize_id(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

struct RunDir {
  fs::path dir;
  std::string run_id;
};

json load_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return json();
  json m;
  in >> m;
  return m;
}

void save_manifest(const fs::path& dir, const json& m) {
  fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << m.dump(2) << "\n";
  }
  fs::rename(tmp, dir / "manifest.json");
}

void manifest_append(const fs::path& dir, const std::string& name, const std::string& rel) {
  json m = load_manifest(dir);
  json e;
  e["name"] = name;
  e["path"] = rel;
  e["written_at"] = now_iso8601();
  m["entries"].push_back(e);
  m["artifact_paths"][name] = rel;
  save_manifest(dir, m);
}

// Creates the run directory, stores the config copy and a fresh manifest.
RunDir open_run(const Flags& f, const std::string& derived_id, const ParsedConfig* pc) {
  RunDir rd;
  rd.run_id = sanitize_id(f.has("run-id") ? f.get("run-id")
                          : pc && !pc->cfg.run_id.empty() ? pc->cfg.run_id
                                                          : derived_id);
  rd.dir = fs::path(run_root(f)) / rd.run_id;
  fs::create_directories(rd.dir);
  json m = load_manifest(rd.dir);
  if (m.is_null()) {
    m["run_id"] = rd.run_id;
    m["config_hash"] = pc ? hash_hex(pc->hash) : "";
    m["created_at"] = now_iso8601();
    m["entries"] = json::array();
    m["artifact_paths"] = json::object();
    save_manifest(rd.dir, m);
    if (pc) {
      std::ofstream out(rd.dir / "config.cfg", std::ios::binary);
      out << pc->raw;
      manifest_append(rd.dir, "config", "config.cfg");
    }
  }
  return rd;
}

// Picks base.ext, then base.2.ext, base.3.ext ... so reruns never overwrite.
fs::path fresh_path(const fs::path& dir, const std::string& base, const std::string& ext) {
  fs::path p = dir / (base + ext);
  for (int i = 2; fs::exists(p); ++i) p = dir / (base + "." + std::to_string(i) + ext);
  return p;
}

// ----------------------------------------------------------- config entry --
ParsedConfig config_or_exit(const Flags& f) {
  if (!f.has("config")) throw UsageError("--config is required for this command");
  ParsedConfig pc = load_config(f.get("config"));
  if (f.has("seed")) {
    const uint64_t s = static_cast<uint64_t>(f.integer("seed", 1));
    pc.cfg.seed = s;
    pc.cfg.train.seed = s;
    pc.cfg.data.seed = s;
  }
  if (!pc.ok()) {
    std::string msg = "config validation failed for '" + f.get("config") + "':";
    for (const std::string& v : pc.violations) msg += "\n  - " + v;
    throw ConfigExit(msg);
  }
  return pc;
}

Variant parse_variant(const std::string& v) {
  if (v == "oaat") return Variant::oaat;
  if (v == "pgd_at") return Variant::pgd_at;
  if (v == "trades") return Variant::trades;
  if (v == "awp_trades") return Variant::awp_trades;
  throw UsageError("unknown variant '" + v + "'");
}

std::string ckpt_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%04d.bin", epoch);
  return buf;
}

int latest_checkpoint_epoch(const fs::path& dir) {
  int best = -1;
  for (const auto& ent : fs::directory_iterator(dir)) {
    int ep;
    if (std::sscanf(ent.path().filename().string().c_str(), "ckpt_epoch_%d.bin", &ep) == 1)
      best = std::max(best, ep);
  }
  return best;
}

constexpr const char* kMetricsHeader =
    "epoch,lr,eps_tilde,beta,alpha,lambda,loss_total,loss_ce,loss_adv,val_clean,val_robust,"
    "n_std,n_os,n_oi\n";

void truncate_metrics(const fs::path& csv, int keep_up_to) {
  std::ifstream in(csv);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    int ep = 0;
    if (std::sscanf(line.c_str(), "%d,", &ep) == 1 && ep <= keep_up_to) keep.push_back(line);
  }
  in.close();
  std::ofstream out(csv, std::ios::trunc);
  out << kMetricsHeader;
  for (const std::string& l : keep) out << l << "\n";
}

// ------------------------------------------------------------------ train --
int cmd_train(const Flags& f) {
  ParsedConfig pc;
  RunDir rd;
  bool resuming = false;

  if (f.has("resume")) {
    resuming = true;
    rd.run_id = sanitize_id(f.get("resume"));
    rd.dir = fs::path(run_root(f)) / rd.run_id;
    if (!fs::exists(rd.dir / "config.cfg"))
      throw ConfigExit("resume: no stored config under '" + rd.dir.string() + "'");
    pc = load_config((rd.dir / "config.cfg").string());
    json m = load_manifest(rd.dir);
    const std::string recorded = m.value("config_hash", "");
    if (recorded != hash_hex(pc.hash))
      throw ConfigExit("resume: stored config hash " + hash_hex(pc.hash) +
                       " does not match manifest " + recorded + " (config was modified)");
    if (!pc.ok()) {
      std::string msg = "resume: stored config is invalid:";
      for (const std::string& v : pc.violations) msg += "\n  - " + v;
      throw ConfigExit(msg);
    }
  } else {
    pc = config_or_exit(f);
    if (f.has("variant")) pc.cfg.train.variant = parse_variant(f.get("variant"));
    const std::string derived = std::string("train-") + variant_name(pc.cfg.train.variant) +
                                "-s" + std::to_string(pc.cfg.seed) + "-" +
                                hash_hex(pc.hash).substr(0, 8);
    rd = open_run(f, derived, &pc);
    if (latest_checkpoint_epoch(rd.dir) >= 0)
      throw ConfigExit("run '" + rd.run_id + "' already has checkpoints; use --resume " +
                       rd.run_id);
  }

  FullConfig& cfg = pc.cfg;
  std::printf("run %s: variant=%s epochs=%d seed=%" PRIu64 "\n", rd.run_id.c_str(),
              variant_name(cfg.train.variant), cfg.train.total_epochs, cfg.seed);

  DataSplits data = load_dataset(cfg.data);
  TrainerState<float> S = make_trainer<float>(cfg.train, cfg.model);

  const fs::path metrics = rd.dir / "metrics.csv";
  if (resuming) {
    const int ep = latest_checkpoint_epoch(rd.dir);
    if (ep < 0) throw ConfigExit("resume: no checkpoints under '" + rd.dir.string() + "'");
    load_checkpoint((rd.dir / ckpt_name(ep)).string(), S);
    truncate_metrics(metrics, ep);
    std::printf("resumed at epoch %d\n", ep);
  } else {
    std::ofstream out(metrics, std::ios::trunc);
    out << kMetricsHeader;
    manifest_append(rd.dir, "metrics", "metrics.csv");
  }

  const std::string hash = hash_hex(pc.hash);
  TrainHooks<float> hooks;
  hooks.after_epoch = [&](TrainerState<float>& st, const EpochRecord& r) {
    const std::string name = ckpt_name(r.epoch);
    save_checkpoint((rd.dir / name).string(), st, hash);
    manifest_append(rd.dir, "checkpoint_epoch_" + std::to_string(r.epoch), name);
    std::ofstream out(metrics, std::ios::app);
    char line[512];
    std::snprintf(line, sizeof line,
                  "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.6g,%.6g,%d,%d,%d\n", r.epoch,
                  r.lr, r.eps_tilde, r.beta, r.alpha, r.lambda, r.loss_total, r.loss_ce,
                  r.loss_adv, r.val_clean, r.val_robust, r.n_std, r.n_os, r.n_oi);
    out << line;
    std::printf("epoch %3d/%d  loss %.4f  val_clean %.3f  val_robust %.3f\n", r.epoch,
                cfg.train.total_epochs, r.loss_total, r.val_clean, r.val_robust);
    std::fflush(stdout);
  };

  train_epochs(S, data, hooks, cfg.data.n_val > 0, cfg.aug);
  std::printf("done; artifacts under %s\n", rd.dir.string().c_str());
  return 0;
}

// ------------------------------------------------------------------- eval --
int cmd_eval(const Flags& f) {
  ParsedConfig pc = config_or_exit(f);
  if (!f.has("checkpoint")) throw UsageError("eval: --checkpoint is required");
  const bool use_ewa = f.get("use-ewa", pc.cfg.eval.use_ewa ? "true" : "false") == "true";

  RunDir rd = open_run(f, "eval-s" + std::to_string(pc.cfg.seed) + "-" +
                              hash_hex(pc.hash).substr(0, 8),
                       &pc);
  DataSplits data = load_dataset(pc.cfg.data);
  SmallResNet<float> model = load_model_from_checkpoint<float>(f.get("checkpoint"), use_ewa);

  const EvalConfig& ec = pc.cfg.eval;
  ThreatModel tm{NormKind::linf, ec.eps, true};
  auto members = desk_ensemble(ec.square_queries);
  members[0].spec.steps = ec.pgd_steps;
  members[1].spec.steps = ec.pgd_steps;

  const double clean = clean_accuracy(model, data.test);
  std::vector<double> per;
  std::vector<uint8_t> flags =
      ensemble_robust_flags(model, data.test, tm, members, pc.cfg.seed, 256, &per);
  const double ens = fraction_of(flags);

  std::vector<double> grid = ec.masking_grid;
  if (grid.empty()) grid = {0.0, ec.eps, 2 * ec.eps, 4 * ec.eps};
  MaskingReport mask = masking_report(model, data.test, grid, pc.cfg.seed);

  json rep;
  rep["run_id"] = rd.run_id;
  rep["checkpoint"] = f.get("checkpoint");
  rep["weights"] = use_ewa ? "ewa" : "live";
  rep["ensemble_label"] = "desk ensemble";
  rep["eps"] = ec.eps;
  rep["clean_acc"] = clean;
  rep["ensemble_robust_acc"] = ens;
  for (size_t i = 0; i < members.size(); ++i) rep["robust_acc"][members[i].name] = per[i];
  rep["masking"]["eps_grid"] = mask.eps_grid;
  rep["masking"]["pgd7_acc"] = mask.pgd7_acc;
  rep["masking"]["fgsm_loss"] = mask.fgsm_loss;
  rep["masking"]["loss_r2"] = mask.loss_r2;
  rep["masking"]["flag_residual_accuracy"] = mask.flag_residual_accuracy;
  rep["masking"]["flag_nonlinear_loss"] = mask.flag_nonlinear_loss;

  if (f.has("baseline-checkpoint")) {
    SmallResNet<float> base =
        load_model_from_checkpoint<float>(f.get("baseline-checkpoint"), use_ewa);
    ContrastReport cr = contrast_subset_eval(model, base, data.test, tm, members[0], pc.cfg.seed,
                                             ec.n_bins);
    for (const ContrastGain& g : cr.bins) {
      json row;
      row["bin"] = g.bin_index;
      row["n"] = g.n;
      row["mean_contrast"] = g.mean_contrast;
      row["model_acc"] = g.model_acc;
      row["baseline_acc"] = g.baseline_acc;
      row["gain"] = g.gain;
      rep["contrast_gains"].push_back(row);
    }
  }

  fs::path jpath = fresh_path(rd.dir, "eval_report", ".json");
  {
    std::ofstream out(jpath);
    out << rep.dump(2) << "\n";
  }
  manifest_append(rd.dir, "eval_report_json", jpath.filename().string());

  fs::path cpath = fresh_path(rd.dir, "eval_report", ".csv");
  {
    std::ofstream out(cpath);
    out << "metric,attack,eps,value\n";
    out << "clean_acc,none,0," << clean << "\n";
    for (size_t i = 0; i < members.size(); ++i)
      out << "robust_acc," << members[i].name << "," << ec.eps << "," << per[i] << "\n";
    out << "robust_acc,desk_ensemble," << ec.eps << "," << ens << "\n";
    for (size_t i = 0; i < mask.eps_grid.size(); ++i) {
      out << "masking_pgd7_acc,pgd7," << mask.eps_grid[i] << "," << mask.pgd7_acc[i] << "\n";
      out << "masking_fgsm_loss,fgsm," << mask.eps_grid[i] << "," << mask.fgsm_loss[i] << "\n";
    }
    out << "masking_loss_r2,fgsm,0," << mask.loss_r2 << "\n";
  }
  manifest_append(rd.dir, "eval_report_csv", cpath.filename().string());

  std::printf("clean %.4f  desk-ensemble robust@%.4g %.4f  (report: %s)\n", clean, ec.eps, ens,
              jpath.string().c_str());
  return 0;
}

// ----------------------------------------------------------------- attack --
int cmd_attack(const Flags& f) {
  ParsedConfig pc = config_or_exit(f);
  if (!f.has("checkpoint")) throw UsageError("attack: --checkpoint is required");
  const FullConfig& c = pc.cfg;

  RunDir rd = open_run(f, "attack-" + c.attack_kind + "-s" + std::to_string(c.seed) + "-" +
                              hash_hex(pc.hash).substr(0, 8),
                       &pc);
  DataSplits data = load_dataset(c.data);
  SmallResNet<float> model = load_model_from_checkpoint<float>(f.get("checkpoint"), false);

  ThreatModel tm{c.attack_norm == "l2" ? NormKind::l2 : NormKind::linf, c.attack_eps, true};
  AttackSpec spec;
  spec.steps = c.attack_steps;
  spec.step_size = c.attack_step_size;
  spec.lambda = c.attack_lambda;
  if (c.attack_loss == "kl") spec.loss = AttackLoss::kl;
  else if (c.attack_loss == "ce_minus_lpips") spec.loss = AttackLoss::ce_minus_lpips;
  else if (c.attack_loss == "ce_minus_disc") spec.loss = AttackLoss::ce_minus_disc;

  const Dataset& ds = data.test;
  const int64_t n = ds.size();
  Tensorf delta_all(ds.x.shape), xadv_all(ds.x.shape);
  std::vector<int> pred_clean(static_cast<size_t>(n)), pred_adv(static_cast<size_t>(n));

  LpipsContext<float> lpips{&model};
  DiscriminatorResult<float> disc;
  AttackNets<float> nets;
  nets.model = &model;
  if (spec.loss == AttackLoss::ce_minus_lpips) nets.lpips = &lpips;
  if (spec.loss == AttackLoss::ce_minus_disc) {
    disc = train_oi_discriminator(model, data.train, 3, c.attack_eps, c.seed);
    std::printf("discriminator holdout accuracy %.3f\n", disc.holdout_accuracy);
    nets.disc = &disc.disc;
  }

  BatchStream bs(ds, 128, 0, 0);
  int64_t done = 0;
  for (int bi = 0; bi < bs.n_batches(); ++bi) {
    ImageBatchf b = bs.get(bi);
    AttackSpec sp = spec;
    sp.seed = stream_seed(c.seed, "attack_cli", static_cast<uint64_t>(bi));
    Perturbation<float> p;
    if (c.attack_kind == "fgsm") p = fgsm(model, b, tm);
    else if (c.attack_kind == "rfgsm")
      p = rfgsm(model, b, tm,
                c.attack_rfgsm_noise < 0 ? c.attack_eps / 2 : c.attack_rfgsm_noise, sp.seed);
    else if (c.attack_kind == "square")
      p = square_attack(model, b, tm, c.attack_queries, sp.seed);
    else p = pgd(nets, b, tm, sp);

    Tensorf xa(b.x.shape);
    for (size_t i = 0; i < xa.data.size(); ++i) xa.data[i] = b.x.data[i] + p.delta.data[i];
    auto pc_ = argmax_rows(model.forward(b.x, NormMode::eval, GradScope::none));
    auto pa_ = argmax_rows(model.forward(xa, NormMode::eval, GradScope::none));
    const int64_t chw = b.x.numel() / b.size();
    for (int64_t i = 0; i < b.size(); ++i) {
      std::copy_n(p.delta.data.begin() + i * chw, chw,
                  delta_all.data.begin() + (done + i) * chw);
      std::copy_n(xa.data.begin() + i * chw, chw, xadv_all.data.begin() + (done + i) * chw);
      pred_clean[static_cast<size_t>(done + i)] = pc_[static_cast<size_t>(i)];
      pred_adv[static_cast<size_t>(done + i)] = pa_[static_cast<size_t>(i)];
    }
    done += b.size();
  }

  Container arc;
  arc.meta["format"] = "oaat-attack-v1";
  arc.meta["kind"] = c.attack_kind;
  arc.meta["loss"] = c.attack_loss;
  arc.meta["norm"] = c.attack_norm;
  arc.meta["eps"] = std::to_string(c.attack_eps);
  arc.meta["steps"] = std::to_string(c.attack_steps);
  arc.meta["seed"] = std::to_string(c.seed);
  arc.tensors["delta"] = delta_all;
  arc.tensors["x_adv"] = xadv_all;
  Tensorf labels({n});
  for (int64_t i = 0; i < n; ++i) labels.data[static_cast<size_t>(i)] =
      static_cast<float>(ds.y[static_cast<size_t>(i)]);
  arc.tensors["labels"] = labels;
  fs::path apath = fresh_path(rd.dir, "attack_archive", ".bin");
  save_container(apath.string(), arc);
  manifest_append(rd.dir, "attack_archive", apath.filename().string());

  fs::path cpath = fresh_path(rd.dir, "attack_summary", ".csv");
  int64_t n_flipped = 0, n_adv_correct = 0;
  {
    std::ofstream out(cpath);
    out << "index,label,pred_clean,pred_adv,clean_correct,adv_correct,linf,l2\n";
    const int64_t chw = ds.x.numel() / std::max<int64_t>(n, 1);
    for (int64_t i = 0; i < n; ++i) {
      double linf = 0, l2 = 0;
      for (int64_t j = 0; j < chw; ++j) {
        const double v = delta_all.data[static_cast<size_t>(i * chw + j)];
        linf = std::max(linf, std::abs(v));
        l2 += v * v;
      }
      const int y = ds.y[static_cast<size_t>(i)];
      const bool cc = pred_clean[static_cast<size_t>(i)] == y;
      const bool ac = pred_adv[static_cast<size_t>(i)] == y;
      n_adv_correct += ac;
      n_flipped += cc && !ac;
      out << i << "," << y << "," << pred_clean[static_cast<size_t>(i)] << ","
          << pred_adv[static_cast<size_t>(i)] << "," << cc << "," << ac << "," << linf << ","
          << std::sqrt(l2) << "\n";
    }
  }
  manifest_append(rd.dir, "attack_summary", cpath.filename().string());
  std::printf("%s: %lld/%lld robust after attack, %lld flipped (archive: %s)\n",
              c.attack_kind.c_str(), static_cast<long long>(n_adv_correct),
              static_cast<long long>(n), static_cast<long long>(n_flipped),
              apath.string().c_str());
  return 0;
}

// ----------------------------------------------------------------- theory --
int cmd_theory(const Flags& f) {
  SyntheticDistribution dist;
  dist.p = f.real("p", 0.95);
  dist.alpha = f.real("alpha", 3.0 / std::sqrt(100.0));
  dist.d = static_cast<int>(f.integer("d", 100));
  const double eps = f.real("eps", 2 * dist.alpha);
  const int n_mc = static_cast<int>(f.integer("n-mc", 100000));
  const int erm_n = static_cast<int>(f.integer("erm-n", 5000));
  const uint64_t seed = static_cast<uint64_t>(f.integer("seed", 1));

  RunDir rd = open_run(f, "theory-s" + std::to_string(seed), nullptr);

  const uint64_t mc_seed = stream_seed(seed, "theory_test");
  LinearClassifier case1 = case1_classifier(dist);
  LinearClassifier oracle = oracle_classifier(dist);
  LinearClassifier erm = train_linear_erm(dist, erm_n, stream_seed(seed, "theory_train"));

  struct Row {
    const char* name;
    double closed, mc;
  };
  std::vector<Row> rows = {
      {"case1_accuracy", spurious_classifier_accuracy(dist),
       mc_accuracy(case1, dist, n_mc, mc_seed)},
      {"case1_robust_accuracy", spurious_classifier_robust_accuracy(dist, eps),
       mc_robust_accuracy(case1, dist, eps, n_mc, mc_seed)},
      {"oracle_accuracy", oracle_accuracy(dist), mc_accuracy(oracle, dist, n_mc, mc_seed)},
      {"oracle_robust_accuracy", oracle_robust_accuracy(dist, eps),
       mc_robust_accuracy(oracle, dist, eps, n_mc, mc_seed)},
  };
  const double erm_std = mc_accuracy(erm, dist, n_mc, mc_seed);
  const double erm_rob = mc_robust_accuracy(erm, dist, eps, n_mc, mc_seed);

  fs::path tpath = fresh_path(rd.dir, "theory_table", ".csv");
  {
    std::ofstream out(tpath);
    out << "quantity,closed_form,monte_carlo\n";
    char line[160];
    for (const Row& r : rows) {
      std::snprintf(line, sizeof line, "%s,%.8f,%.8f\n", r.name, r.closed, r.mc);
      out << line;
    }
    std::snprintf(line, sizeof line, "erm_accuracy,,%.8f\n", erm_std);
    out << line;
    std::snprintf(line, sizeof line, "erm_robust_accuracy,,%.8f\n", erm_rob);
    out << line;
    if (dist.p > 0.5 && dist.p < 1) {
      const double gamma = 1 - erm_std;
      std::snprintf(line, sizeof line, "tsipras_bound_for_erm,%.8f,%.8f\n",
                    tsipras_bound(dist.p, gamma), erm_rob);
      out << line;
    }
  }
  manifest_append(rd.dir, "theory_table", tpath.filename().string());

  fs::path mpath = fresh_path(rd.dir, "mass_profile", ".csv");
  {
    std::ofstream out(mpath);
    out << "model,feature1_mass,spurious_mass\n";
    MassProfile mp_erm = perturbation_mass_profile(erm, eps);
    MassProfile mp_orc = perturbation_mass_profile(oracle, eps);
    char line[120];
    std::snprintf(line, sizeof line, "erm,%.8f,%.8f\n", mp_erm.feature1, mp_erm.spurious);
    out << line;
    std::snprintf(line, sizeof line, "oracle,%.8f,%.8f\n", mp_orc.feature1, mp_orc.spurious);
    out << line;
  }
  manifest_append(rd.dir, "mass_profile", mpath.filename().string());

  std::printf("p=%.3f alpha=%.4f d=%d eps=%.4f\n", dist.p, dist.alpha, dist.d, eps);
  for (const Row& r : rows)
    std::printf("  %-26s closed %.6f   mc %.6f\n", r.name, r.closed, r.mc);
  std::printf("  %-26s            -   mc %.6f\n", "erm_accuracy", erm_std);
  std::printf("  %-26s            -   mc %.6f\n", "erm_robust_accuracy", erm_rob);
  std::printf("tables: %s, %s\n", tpath.string().c_str(), mpath.string().c_str());
  return 0;
}

// --------------------------------------------------------------- contrast --
int cmd_contrast(const Flags& f) {
  ParsedConfig pc = config_or_exit(f);
  RunDir rd = open_run(f, "contrast-s" + std::to_string(pc.cfg.seed) + "-" +
                              hash_hex(pc.hash).substr(0, 8),
                       &pc);
  DataSplits data = load_dataset(pc.cfg.data);
  const Dataset& ds = data.test;
  std::vector<double> scores = contrast_scores(ds);
  std::vector<ContrastBin> bins = bin_by_contrast(ds, pc.cfg.eval.n_bins);
  std::vector<int> bin_of(static_cast<size_t>(ds.size()), -1);
  for (const ContrastBin& b : bins)
    for (int64_t i : b.sample_indices) bin_of[static_cast<size_t>(i)] = b.bin_index;

  fs::path spath = fresh_path(rd.dir, "contrast_scores", ".csv");
  {
    std::ofstream out(spath);
    out << "index,label,score,bin\n";
    for (int64_t i = 0; i < ds.size(); ++i)
      out << i << "," << ds.y[static_cast<size_t>(i)] << "," << scores[static_cast<size_t>(i)]
          << "," << bin_of[static_cast<size_t>(i)] << "\n";
  }
  manifest_append(rd.dir, "contrast_scores", spath.filename().string());

  fs::path bpath = fresh_path(rd.dir, "contrast_bins", ".csv");
  {
    std::ofstream out(bpath);
    out << "bin,n,mean_contrast\n";
    for (const ContrastBin& b : bins)
      out << b.bin_index << "," << b.sample_indices.size() << "," << b.mean_contrast << "\n";
  }
  manifest_append(rd.dir, "contrast_bins", bpath.filename().string());
  std::printf("%lld images into %d bins (scores: %s)\n", static_cast<long long>(ds.size()),
              pc.cfg.eval.n_bins, spath.string().c_str());
  return 0;
}

// --------------------------------------------------------------- plotdata --
int cmd_plotdata(const Flags& f) {
  ParsedConfig pc = config_or_exit(f);
  RunDir rd = open_run(f, "plotdata-s" + std::to_string(pc.cfg.seed) + "-" +
                              hash_hex(pc.hash).substr(0, 8),
                       &pc);

  fs::path sched = fresh_path(rd.dir, "schedules", ".csv");
  {
    std::ofstream out(sched);
    out << "epoch,eps_tilde,beta,alpha,lambda,lr,phase,attack_steps\n";
    for (int e = 1; e <= pc.cfg.train.total_epochs; ++e) {
      ScheduleState s = schedule_at(pc.cfg.train, e);
      out << e << "," << s.eps_tilde << "," << s.beta << "," << s.alpha << "," << s.lambda << ","
          << s.lr << "," << (s.phase == Phase::standard ? "standard" : "oracle_aligned") << ","
          << s.n_attack_steps << "\n";
    }
  }
  manifest_append(rd.dir, "schedules", sched.filename().string());
  std::printf("schedules: %s\n", sched.string().c_str());
  if (!f.has("checkpoint")) return 0;

  DataSplits data = load_dataset(pc.cfg.data);
  SmallResNet<float> model =
      load_model_from_checkpoint<float>(f.get("checkpoint"), pc.cfg.eval.use_ewa);
  const EvalConfig& ec = pc.cfg.eval;

  std::vector<double> grid = ec.masking_grid;
  if (grid.empty()) grid = {0.0, ec.eps, 2 * ec.eps, 4 * ec.eps};
  MaskingReport mask = masking_report(model, data.test, grid, pc.cfg.seed);
  fs::path mpath = fresh_path(rd.dir, "masking", ".csv");
  {
    std::ofstream out(mpath);
    out << "eps,pgd7_acc,fgsm_loss\n";
    for (size_t i = 0; i < grid.size(); ++i)
      out << grid[i] << "," << mask.pgd7_acc[i] << "," << mask.fgsm_loss[i] << "\n";
  }
  manifest_append(rd.dir, "masking", mpath.filename().string());

  fs::path rpath = fresh_path(rd.dir, "robust_vs_eps", ".csv");
  {
    std::ofstream out(rpath);
    out << "eps,pgd_acc,steps\n";
    for (double e : grid) {
      ThreatModel tm{NormKind::linf, e, true};
      AttackMember m = pgd_member("pgd", AttackLoss::ce, ec.pgd_steps);
      out << e << "," << robust_accuracy(model, data.test, tm, m, pc.cfg.seed) << ","
          << ec.pgd_steps << "\n";
    }
  }
  manifest_append(rd.dir, "robust_vs_eps", rpath.filename().string());

  ThreatModel tm{NormKind::linf, ec.eps, true};
  AttackMember m = pgd_member("pgd", AttackLoss::ce, 7);
  if (f.has("baseline-checkpoint")) {
    SmallResNet<float> base =
        load_model_from_checkpoint<float>(f.get("baseline-checkpoint"), pc.cfg.eval.use_ewa);
    ContrastReport cr =
        contrast_subset_eval(model, base, data.test, tm, m, pc.cfg.seed, ec.n_bins);
    fs::path cpath = fresh_path(rd.dir, "contrast_gains", ".csv");
    std::ofstream out(cpath);
    out << "bin,n,mean_contrast,model_acc,baseline_acc,gain\n";
    for (const ContrastGain& g : cr.bins)
      out << g.bin_index << "," << g.n << "," << g.mean_contrast << "," << g.model_acc << ","
          << g.baseline_acc << "," << g.gain << "\n";
    manifest_append(rd.dir, "contrast_gains", cpath.filename().string());
  } else {
    std::vector<uint8_t> flags = robust_flags(model, data.test, tm, m, pc.cfg.seed);
    std::vector<ContrastBin> bins = bin_by_contrast(data.test, ec.n_bins);
    fs::path cpath = fresh_path(rd.dir, "contrast_model", ".csv");
    std::ofstream out(cpath);
    out << "bin,n,mean_contrast,model_acc\n";
    for (const ContrastBin& b : bins) {
      int64_t c = 0;
      for (int64_t i : b.sample_indices) c += flags[static_cast<size_t>(i)];
      out << b.bin_index << "," << b.sample_indices.size() << "," << b.mean_contrast << ","
          << static_cast<double>(c) / static_cast<double>(b.sample_indices.size()) << "\n";
    }
    manifest_append(rd.dir, "contrast_model", cpath.filename().string());
  }
  std::printf("plot series under %s\n", rd.dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fputs(kUsage, stderr);
    return 2;
  }
  const std::string cmd = argv[1];
  const std::set<std::string> common = {"config", "out", "run-id", "seed", "device"};
  try {
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      std::fputs(kUsage, stdout);
      return 0;
    }
    if (cmd == "train") {
      auto a = common;
      a.insert({"variant", "resume"});
      return cmd_train(parse_flags(argc, argv, a));
    }
    if (cmd == "eval") {
      auto a = common;
      a.insert({"checkpoint", "baseline-checkpoint", "use-ewa"});
      return cmd_eval(parse_flags(argc, argv, a));
    }
    if (cmd == "attack") {
      auto a = common;
      a.insert({"checkpoint"});
      return cmd_attack(parse_flags(argc, argv, a));
    }
    if (cmd == "theory") {
      auto a = common;
      a.insert({"p", "alpha", "d", "eps", "n-mc", "erm-n"});
      return cmd_theory(parse_flags(argc, argv, a));
    }
    if (cmd == "contrast") return cmd_contrast(parse_flags(argc, argv, common));
    if (cmd == "plotdata") {
      auto a = common;
      a.insert({"checkpoint", "baseline-checkpoint"});
      return cmd_plotdata(parse_flags(argc, argv, a));
    }
    std::fprintf(stderr, "unknown command '%s'\n\n%s", cmd.c_str(), kUsage);
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const ConfigExit& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
