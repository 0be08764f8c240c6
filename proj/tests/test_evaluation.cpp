#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "oaat/data.hpp"
#include "oaat/evaluation.hpp"
#include "oaat/model.hpp"

using namespace oaat;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig mc;
  mc.widths = {4, 4, 8};
  return mc;
}

SmallResNet<double> tiny_model(uint64_t seed) {
  SmallResNet<double> m;
  m.configure(tiny_cfg());
  m.init_params(seed);
  return m;
}

Dataset tiny_data(int64_t n, uint64_t seed) { return make_synthetic_dataset(n, 10, 8, seed, "eval_tests"); }

std::vector<uint8_t> clean_flags(SmallResNet<double>& m, const Dataset& d) {
  Tensor<double> x = d.x.cast<double>();
  const Tensor<double>& z = m.forward(x, NormMode::eval, GradScope::none);
  auto pred = argmax_rows(z);
  std::vector<uint8_t> f(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) f[i] = pred[i] == d.y[i] ? 1 : 0;
  return f;
}

}  // namespace

TEST_CASE("fraction_of basics") {
  CHECK(fraction_of({}) == 0.0);
  CHECK(fraction_of({1, 0, 1, 1}) == 0.75);
  CHECK(fraction_of({0, 0}) == 0.0);
  CHECK(fraction_of({1, 1, 1}) == 1.0);
}

TEST_CASE("pgd_member and desk ensemble composition") {
  AttackMember m = pgd_member("pgd50_kl", AttackLoss::kl, 50);
  CHECK(m.name == "pgd50_kl");
  CHECK(m.kind == AttackMember::Kind::pgd);
  CHECK(m.spec.loss == AttackLoss::kl);
  CHECK(m.spec.steps == 50);

  auto e = desk_ensemble(123);
  REQUIRE(e.size() == 4);
  CHECK(e[0].name == "pgd50_ce");
  CHECK(e[0].kind == AttackMember::Kind::pgd);
  CHECK(e[0].spec.steps == 50);
  CHECK(e[1].name == "pgd50_kl");
  CHECK(e[1].spec.loss == AttackLoss::kl);
  CHECK(e[2].name == "rfgsm");
  CHECK(e[2].kind == AttackMember::Kind::rfgsm);
  CHECK(e[2].rfgsm_noise < 0);
  CHECK(e[3].name == "square");
  CHECK(e[3].kind == AttackMember::Kind::square);
  CHECK(e[3].square_queries == 123);
}

TEST_CASE("zero radius reduces every member to clean accuracy") {
  auto m = tiny_model(3);
  Dataset d = tiny_data(48, 5);
  ThreatModel tm{NormKind::linf, 0.0, true};
  std::vector<uint8_t> clean = clean_flags(m, d);
  const double clean_acc = clean_accuracy(m, d);
  REQUIRE(clean.size() == static_cast<size_t>(d.size()));

  auto members = desk_ensemble(40);
  members[0].spec.steps = 5;
  members[1].spec.steps = 5;
  for (const AttackMember& mem : members) {
    std::vector<uint8_t> f = robust_flags(m, d, tm, mem, 7);
    CHECK(f == clean);
    CHECK(robust_accuracy(m, d, tm, mem, 7) == clean_acc);
  }
  std::vector<double> per;
  CHECK(ensemble_robust_accuracy(m, d, tm, members, 7, 256, &per) == clean_acc);
  REQUIRE(per.size() == members.size());
  for (double a : per) CHECK(a == clean_acc);
}

TEST_CASE("ensemble of one member matches that member") {
  auto m = tiny_model(11);
  Dataset d = tiny_data(40, 13);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};
  AttackMember mem = pgd_member("pgd3", AttackLoss::ce, 3);
  std::vector<uint8_t> solo = robust_flags(m, d, tm, mem, 21);
  std::vector<double> per;
  std::vector<uint8_t> ens = ensemble_robust_flags(m, d, tm, {mem}, 21, 256, &per);
  CHECK(ens == solo);
  REQUIRE(per.size() == 1);
  CHECK(per[0] == fraction_of(solo));
}

TEST_CASE("ensemble robustness is the AND of member robustness") {
  auto m = tiny_model(17);
  Dataset d = tiny_data(60, 19);
  ThreatModel tm{NormKind::linf, 16.0 / 255.0, true};
  std::vector<AttackMember> members = {pgd_member("pgd3_ce", AttackLoss::ce, 3),
                                       pgd_member("pgd3_kl", AttackLoss::kl, 3)};
  AttackMember r;
  r.name = "rfgsm";
  r.kind = AttackMember::Kind::rfgsm;
  members.push_back(r);

  std::vector<double> per;
  std::vector<uint8_t> ens = ensemble_robust_flags(m, d, tm, members, 23, 256, &per);
  REQUIRE(per.size() == members.size());
  double lo = 1.0;
  for (size_t k = 0; k < members.size(); ++k) {
    std::vector<uint8_t> f = robust_flags(m, d, tm, members[k], 23);
    CHECK(per[k] == fraction_of(f));
    lo = std::min(lo, per[k]);
    for (size_t i = 0; i < ens.size(); ++i) CHECK(ens[i] <= f[i]);
  }
  CHECK(fraction_of(ens) <= lo);
}

TEST_CASE("ensemble with no members throws") {
  auto m = tiny_model(1);
  Dataset d = tiny_data(8, 1);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};
  CHECK_THROWS_AS(ensemble_robust_flags(m, d, tm, {}, 0), std::invalid_argument);
}

TEST_CASE("rfgsm member default noise is half the radius") {
  auto m = tiny_model(29);
  Dataset d = tiny_data(32, 31);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};
  AttackMember def;
  def.name = "rfgsm";
  def.kind = AttackMember::Kind::rfgsm;
  AttackMember exp = def;
  exp.rfgsm_noise = tm.eps / 2.0;
  CHECK(robust_flags(m, d, tm, def, 37) == robust_flags(m, d, tm, exp, 37));
}

TEST_CASE("robust flags are deterministic in the seed") {
  auto m = tiny_model(41);
  Dataset d = tiny_data(32, 43);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};

  AttackMember p = pgd_member("pgd3", AttackLoss::ce, 3);
  AttackMember r;
  r.name = "rfgsm";
  r.kind = AttackMember::Kind::rfgsm;
  AttackMember s;
  s.name = "square";
  s.kind = AttackMember::Kind::square;
  s.square_queries = 60;
  for (const AttackMember& mem : {p, r, s})
    CHECK(robust_flags(m, d, tm, mem, 47) == robust_flags(m, d, tm, mem, 47));
}

TEST_CASE("linear fit r2 conventions and exact cases") {
  CHECK(eval_detail::linear_fit_r2({}, {}) == 1.0);
  CHECK(eval_detail::linear_fit_r2({1.0}, {2.0}) == 1.0);
  // constant response: nothing to explain
  CHECK(eval_detail::linear_fit_r2({0.0, 1.0, 2.0}, {2.0, 2.0, 2.0}) == 1.0);
  // constant predictor with varying response: nothing explained
  CHECK(eval_detail::linear_fit_r2({1.0, 1.0, 1.0}, {0.0, 1.0, 2.0}) == 0.0);
  // exact line y = 2x + 1
  CHECK(eval_detail::linear_fit_r2({0.0, 0.5, 1.0, 2.0}, {1.0, 2.0, 3.0, 5.0}) == 1.0);
  // symmetric tent has zero slope, explains nothing
  CHECK(eval_detail::linear_fit_r2({0.0, 1.0, 2.0}, {0.0, 1.0, 0.0}) == 0.0);
}

TEST_CASE("masking report validates the grid") {
  auto m = tiny_model(53);
  Dataset d = tiny_data(16, 59);
  CHECK_THROWS_AS(masking_report(m, d, {0.02, 0.01}, 1), std::invalid_argument);
  CHECK_NOTHROW(masking_report(m, d, {0.0, 0.0, 0.01}, 1));
}

TEST_CASE("masking report at zero radius reproduces clean accuracy and loss") {
  auto m = tiny_model(61);
  Dataset d = tiny_data(40, 67);
  MaskingReport rep = masking_report(m, d, {0.0, 8.0 / 255.0}, 71, 256);
  REQUIRE(rep.eps_grid.size() == 2);
  REQUIRE(rep.pgd7_acc.size() == 2);
  REQUIRE(rep.fgsm_loss.size() == 2);

  CHECK(rep.pgd7_acc[0] == clean_accuracy(m, d));
  Tensor<double> x = d.x.cast<double>();
  const Tensor<double>& z = m.forward(x, NormMode::eval, GradScope::none);
  double s = 0;
  for (double l : ce_per_sample(z, d.y)) s += l;
  CHECK_THAT(rep.fgsm_loss[0], WithinAbs(s / static_cast<double>(d.size()), 1e-12));

  CHECK(rep.acc_at_max_eps == rep.pgd7_acc.back());
  CHECK(rep.flag_residual_accuracy == (rep.acc_at_max_eps > 0.02));
  CHECK(rep.flag_nonlinear_loss == (rep.loss_r2 < 0.9));
}

TEST_CASE("constant model trips the residual accuracy flag") {
  SmallResNet<double> m;
  m.configure(tiny_cfg());
  m.init_params(73);
  for (auto& pr : m.params()) pr.value->fill(0);
  Dataset d = tiny_data(60, 79);  // balanced labels, 6 per class

  MaskingReport rep = masking_report(m, d, {0.0, 16.0 / 255.0, 64.0 / 255.0}, 83);
  for (double a : rep.pgd7_acc) CHECK(a == 0.1);  // always predicts class 0
  CHECK(rep.acc_at_max_eps == 0.1);
  CHECK(rep.flag_residual_accuracy);
  for (double l : rep.fgsm_loss) CHECK_THAT(l, WithinAbs(std::log(10.0), 1e-9));
}

TEST_CASE("contrast subset evaluation recomposes exactly") {
  auto model = tiny_model(89);
  auto base = tiny_model(97);
  Dataset d = tiny_data(60, 101);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};
  AttackMember mem = pgd_member("pgd3", AttackLoss::ce, 3);
  const int n_bins = 5;

  ContrastReport rep = contrast_subset_eval(model, base, d, tm, mem, 103, n_bins);
  REQUIRE(rep.bins.size() == n_bins);

  std::vector<uint8_t> fm = robust_flags(model, d, tm, mem, 103);
  std::vector<uint8_t> fb = robust_flags(base, d, tm, mem, 103);
  std::vector<ContrastBin> bins = bin_by_contrast(d, n_bins);
  REQUIRE(bins.size() == n_bins);

  int64_t n_total = 0;
  std::vector<int> seen(static_cast<size_t>(d.size()), 0);
  for (int k = 0; k < n_bins; ++k) {
    const ContrastGain& g = rep.bins[static_cast<size_t>(k)];
    CHECK(g.bin_index == k);
    CHECK(g.n == static_cast<int64_t>(bins[static_cast<size_t>(k)].sample_indices.size()));
    CHECK(g.mean_contrast == bins[static_cast<size_t>(k)].mean_contrast);
    int64_t cm = 0, cb = 0;
    for (int64_t idx : bins[static_cast<size_t>(k)].sample_indices) {
      cm += fm[static_cast<size_t>(idx)];
      cb += fb[static_cast<size_t>(idx)];
      seen[static_cast<size_t>(idx)] += 1;
    }
    if (g.n > 0) {
      CHECK(g.model_acc == static_cast<double>(cm) / static_cast<double>(g.n));
      CHECK(g.baseline_acc == static_cast<double>(cb) / static_cast<double>(g.n));
    } else {
      CHECK(g.model_acc == 0.0);
      CHECK(g.baseline_acc == 0.0);
    }
    CHECK(g.gain == g.model_acc - g.baseline_acc);
    n_total += g.n;
  }
  CHECK(n_total == d.size());
  for (int c : seen) CHECK(c == 1);  // bins partition the dataset
  CHECK(rep.model_total == fraction_of(fm));
  CHECK(rep.baseline_total == fraction_of(fb));
}

TEST_CASE("evaluation leaves parameters and buffers untouched") {
  auto model = tiny_model(107);
  auto base = tiny_model(109);
  Dataset d = tiny_data(32, 113);
  ThreatModel tm{NormKind::linf, 8.0 / 255.0, true};
  const uint64_t h0 = param_checksum(model);
  const uint64_t hb = param_checksum(base);
  CHECK(h0 != hb);

  AttackMember mem = pgd_member("pgd3", AttackLoss::ce, 3);
  robust_flags(model, d, tm, mem, 1);
  auto members = desk_ensemble(30);
  members[0].spec.steps = 3;
  members[1].spec.steps = 3;
  ensemble_robust_accuracy(model, d, tm, members, 2);
  masking_report(model, d, {0.0, 8.0 / 255.0}, 3);
  contrast_subset_eval(model, base, d, tm, mem, 4, 4);
  CHECK(param_checksum(model) == h0);
  CHECK(param_checksum(base) == hb);

  model.fc.b.data[0] += 1e-3;
  CHECK(param_checksum(model) != h0);
}
