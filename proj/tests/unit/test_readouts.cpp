#include "../common/oracles.hpp"
#include "helpers.hpp"

#include "saelab/readouts.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace saelab;

namespace {

PatientRecord record(std::vector<int> toks, std::vector<double> deltas, bool died = false) {
  PatientRecord p;
  p.token_ids = std::move(toks);
  p.time_deltas = std::move(deltas);
  p.died = died;
  p.los_hours = 10.0;
  p.time_to_event_hours = 10.0;
  return p;
}

PatientFeatureMatrix feature_matrix(RowMatrixD rows, std::vector<int> died) {
  PatientFeatureMatrix m;
  m.rows = std::move(rows);
  m.died = std::move(died);
  const auto n = static_cast<std::size_t>(m.rows.rows());
  m.los_hours.assign(n, 1.0);
  m.time_to_event.assign(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) m.patient_ids.push_back(static_cast<int>(i));
  return m;
}

// Two Gaussian blobs; label depends on the first column only.
PatientFeatureMatrix blobs(int n, double gap, std::uint64_t seed, double positive_rate = 0.3) {
  Rng rng(seed);
  std::normal_distribution<double> g;
  RowMatrixD x(n, 4);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = uniform01(rng) < positive_rate ? 1 : 0;
    for (int j = 0; j < 4; ++j) x(i, j) = g(rng);
    x(i, 0) += gap * y[static_cast<std::size_t>(i)];
  }
  return feature_matrix(x, y);
}

}  // namespace

TEST_CASE("window parsing and labels") {
  CHECK(WindowSpec::parse("full").kind == WindowKind::full);
  CHECK(WindowSpec::parse("48h").observation_limit == 48.0);
  CHECK(WindowSpec::parse("365d").observation_limit == 365.0 * 24);
  auto w = WindowSpec::parse("1y/3y");
  CHECK(w.kind == WindowKind::obs_outcome);
  CHECK(*w.outcome_horizon == 3 * 8760.0);
  CHECK(WindowSpec::parse("48h").label() == "48h");
  CHECK_THROWS_AS(WindowSpec::parse("48m"), ConfigError);
  CHECK_THROWS_AS(WindowSpec::parse("-4h"), ConfigError);
}

TEST_CASE("truncation keeps events inside the window") {
  auto p = record({2, 3, 4, 5}, {0.0, 24.0, 6.0, 20.0}, true);
  p.time_to_event_hours = 50.0;
  auto in48 = truncate_to_window(p, WindowSpec::hours(48));
  CHECK(in48.token_ids == std::vector<int>{2, 3, 4});
  CHECK(in48.died);
  CHECK(truncate_to_window(p, WindowSpec::hours(30)).token_ids.size() == 3);
  CHECK(truncate_to_window(p, WindowSpec::hours(29.9)).token_ids.size() == 2);
  CHECK(truncate_to_window(p, WindowSpec::full()).token_ids == p.token_ids);
  CHECK(!truncate_to_window(p, WindowSpec::obs_outcome(24, 10)).died);
  CHECK(truncate_to_window(p, WindowSpec::obs_outcome(24, 26)).died);
}

TEST_CASE("truncation is monotone in the limit") {
  auto c = testutil::small_cohort(50, 8);
  for (const auto& p : c.patients) {
    std::size_t prev = 0;
    for (double h : {1.0, 12.0, 48.0, 200.0, 1e6}) {
      const auto n = truncate_to_window(p, WindowSpec::hours(h)).token_ids.size();
      CHECK(n >= prev);
      prev = n;
    }
    CHECK(prev == p.token_ids.size());
  }
}

TEST_CASE("baselines count non-special tokens") {
  Vocabulary v({"[DEATH]", "[PAD]", "MED:A", "MED:B"});
  std::vector<PatientRecord> ps{record({2, 2, 3, 0}, {0, 1, 1, 1}, true), record({}, {})};
  auto b = baselines(ps, v);
  REQUIRE(b.bot.n() == 2);
  CHECK(b.bot.rows.cols() == 2);
  CHECK(b.bot.rows(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(b.bot.rows(0, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(b.presence.rows(0, 0) == 1.0);
  CHECK(b.seqlen.rows(0, 0) == 3.0);
  CHECK(b.bot.rows.row(1).isZero());
  CHECK(b.bot.died == std::vector<int>{1, 0});
  auto ex = baselines(ps, v, true);
  CHECK(ex.bot.n() == 1);
  CHECK(ex.bot.n_excluded == 1);
}

TEST_CASE("pooling averages over positions") {
  RowMatrixF s(2, 3);
  s << 1, 2, 3, 3, 4, 5;
  auto d = pool_dense(s);
  CHECK(d(0) == 2.0);
  CHECK(d(2) == 4.0);
  SparseCode z;
  z.n_features = 4;
  z.k = 1;
  z.indices = {1, 3};
  z.values = {2.0f, 4.0f};
  auto pz = pool_codes(z);
  CHECK(pz(1) == 1.0);
  CHECK(pz(3) == 2.0);
  CHECK(pz(0) == 0.0);
}

TEST_CASE("model pooling skips empty sequences") {
  auto c = testutil::small_cohort(10, 1);
  auto w = testutil::small_model(c.vocabulary.size());
  std::vector<PatientRecord> ps(c.patients.begin(), c.patients.begin() + 5);
  ps[2].token_ids = {c.vocabulary.death_id()};
  ps[2].time_deltas = {0.0};
  auto m = pool_patient(Representation::dense, w, ps, c.vocabulary, 2);
  CHECK(m.n() == 4);
  CHECK(m.n_excluded == 1);
  CHECK(m.patient_ids == std::vector<int>{0, 1, 3, 4});
  CHECK(m.rows.cols() == 32);
  CHECK_THROWS_AS(pool_patient(Representation::sae, w, ps, c.vocabulary, 2, nullptr), ConfigError);
}

TEST_CASE("AUC and Harrell C agree with pair counting") {
  Rng rng(99);
  for (int f = 0; f < 30; ++f) {
    const int n = 5 + static_cast<int>(rng() % 150);
    std::vector<double> s(static_cast<std::size_t>(n)), t(s.size());
    std::vector<int> y(s.size()), e(s.size());
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng() % 12);
      t[static_cast<std::size_t>(i)] = static_cast<double>(1 + rng() % 20);
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
      e[static_cast<std::size_t>(i)] = rng() % 3 != 0;
    }
    y[0] = 0;
    y[1] = 1;
    e[0] = 1;
    t[0] = 0.5;
    CHECK(auc_roc(s, y) == oracle::auc_pairs(s, y));
    CHECK(harrell_c(s, t, e) == oracle::harrell_pairs(s, t, e));
  }
}

TEST_CASE("metric edge cases") {
  std::vector<double> s{0.1, 0.2, 0.3};
  std::vector<int> one_class{1, 1, 1};
  CHECK_THROWS_AS(auc_roc(s, one_class), ConfigError);
  std::vector<int> y{0, 1, 1};
  CHECK(auc_roc(s, y) == 1.0);
  std::vector<double> flat{1.0, 1.0, 1.0};
  CHECK(auc_roc(flat, y) == 0.5);
  std::vector<double> t{1.0, 2.0, 3.0};
  std::vector<int> none{0, 0, 0};
  CHECK_THROWS_AS(harrell_c(s, t, none), ConfigError);
  std::vector<double> yy{1, 2, 3}, yh{1, 2, 3};
  CHECK(r_squared(yy, yh) == 1.0);
}

TEST_CASE("standardizer fits constant columns safely") {
  RowMatrixD x(3, 2);
  x << 1, 5, 2, 5, 3, 5;
  auto s = Standardizer::fit(x);
  CHECK(s.scale(1) == 1.0);
  auto z = s.apply(x);
  CHECK(z.col(0).mean() == doctest::Approx(0.0));
  CHECK(z.col(1).isZero());
}

TEST_CASE("logistic fit separates and rejects one class") {
  auto m = blobs(300, 6.0, 1);
  auto model = fit_logistic(m.rows, m.died, 1.0);
  CHECK(model.converged);
  auto d = model.decision(m.rows);
  std::vector<double> dv(d.data(), d.data() + d.size());
  CHECK(auc_roc(dv, m.died) > 0.99);
  std::vector<int> zeros(300, 0);
  CHECK_THROWS_AS(fit_logistic(m.rows, zeros, 1.0), ConfigError);
}

TEST_CASE("stratified split keeps class balance") {
  std::vector<int> y(200, 0);
  for (int i = 0; i < 40; ++i) y[static_cast<std::size_t>(i * 5)] = 1;
  auto [train, test] = stratified_split(y, 0.2, 3);
  CHECK(train.size() + test.size() == 200);
  int pos = 0;
  for (int i : test) pos += y[static_cast<std::size_t>(i)];
  CHECK(pos == 8);
  auto again = stratified_split(y, 0.2, 3);
  CHECK(again.second == test);
}

TEST_CASE("logistic probe sanity") {
  ProbeConfig cfg;
  cfg.bootstrap = 100;
  auto sep = logistic_probe(blobs(400, 8.0, 2), 0, cfg);
  CHECK(sep.auc >= 0.99);
  CHECK(sep.ci_low <= sep.auc);
  CHECK(sep.ci_high >= sep.auc);
  CHECK(sep.n_test == 80);

  auto weak = blobs(100, 0.0, 3, 0.2);
  auto r = logistic_probe(weak, 1, cfg);
  CHECK(r.underpowered);
}

TEST_CASE("test rows never influence the fitted probe") {
  auto m = blobs(300, 1.0, 4);
  ProbeConfig cfg;
  cfg.bootstrap = 20;
  auto base = logistic_probe(m, 5, cfg);
  auto mutated = m;
  const int victim = base.test_rows.front();
  mutated.rows.row(victim).setConstant(1e6);
  auto after = logistic_probe(mutated, 5, cfg);
  CHECK(after.chosen_c == base.chosen_c);
  REQUIRE(after.test_rows == base.test_rows);
  for (std::size_t i = 1; i < base.test_scores.size(); ++i) CHECK(after.test_scores[i] == base.test_scores[i]);
  CHECK(after.test_scores[0] != base.test_scores[0]);
}

TEST_CASE("ridge probe") {
  Rng rng(7);
  std::normal_distribution<double> g;
  RowMatrixD x(300, 5);
  std::vector<double> y(300), noise(300);
  for (int i = 0; i < 300; ++i) {
    for (int j = 0; j < 5; ++j) x(i, j) = g(rng);
    y[static_cast<std::size_t>(i)] = 2.0 * x(i, 0) - x(i, 3) + 0.5;
    noise[static_cast<std::size_t>(i)] = g(rng);
  }
  ProbeConfig cfg;
  cfg.bootstrap = 50;
  auto exact = ridge_probe(x, y, 0, cfg);
  CHECK(exact.r2 >= 0.999);
  CHECK(exact.chosen_lambda == doctest::Approx(1e-3));
  auto null = ridge_probe(x, noise, 0, cfg);
  CHECK(null.r2 < 0.05);
  std::vector<double> flat(300, 1.0);
  CHECK_THROWS_AS(ridge_probe(x, flat, 0, cfg), ConfigError);
}

TEST_CASE("bootstrap interval brackets the estimate") {
  int used = 0;
  auto ci = bootstrap_ci(50, 200, 1, [](std::span<const int> idx) {
    double s = 0;
    for (int i : idx) s += i;
    return std::optional<double>(s / static_cast<double>(idx.size()));
  }, &used);
  CHECK(used == 200);
  CHECK(ci.first < 24.5);
  CHECK(ci.second > 24.5);
}

TEST_CASE("group stratified probe") {
  auto m = blobs(600, 3.0, 6);
  std::vector<std::string> groups;
  for (int i = 0; i < 600; ++i) groups.push_back(i % 3 == 0 ? "A" : "B");
  ProbeConfig cfg;
  cfg.bootstrap = 20;
  auto rows = group_stratified_probe(m, groups, 0, cfg);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].group == "A");
  CHECK(rows[0].n_test + rows[1].n_test == 120);
  for (const auto& r : rows) CHECK(r.auc > 0.8);
}

TEST_CASE("cox fit matches the direct likelihood maximizer") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = oracle::simulate_exponential(150, 0.7, 0.5, seed);
    for (auto& t : s.times) t = std::ceil(t * 4.0) / 4.0 + 0.25;  // force ties
    auto r = cox_univariate(s.x, s.times, s.events);
    CHECK(r.converged);
    CHECK(r.beta == doctest::Approx(oracle::cox_beta(s.x, s.times, s.events)).epsilon(1e-5));
    CHECK(r.hazard_ratio == doctest::Approx(std::exp(r.beta)));
    const double h = 1e-4, b = r.beta;
    const double info = -(oracle::cox_loglik(b + h, s.x, s.times, s.events) -
                          2 * oracle::cox_loglik(b, s.x, s.times, s.events) +
                          oracle::cox_loglik(b - h, s.x, s.times, s.events)) / (h * h);
    CHECK(r.se == doctest::Approx(1.0 / std::sqrt(info)).epsilon(1e-3));
  }
}

TEST_CASE("cox sign follows the hazard direction") {
  std::vector<double> x{1.0, 0.0, 1.0, 0.0, 0.5, 0.2};
  std::vector<double> t{1.0, 5.0, 2.0, 6.0, 3.0, 4.0};
  std::vector<int> e{1, 1, 1, 0, 1, 1};
  CHECK(cox_univariate(x, t, e).beta > 0.0);
  std::vector<double> rev{0.0, 1.0, 0.0, 1.0, 0.5, 0.8};
  CHECK(cox_univariate(rev, t, e).beta < 0.0);
  std::vector<double> flat(6, 2.0);
  CHECK_THROWS_AS(cox_univariate(flat, t, e), ConfigError);
  std::vector<int> none(6, 0);
  CHECK_THROWS_AS(cox_univariate(x, t, none), ConfigError);
}

TEST_CASE("cox screen ranks and applies the family threshold") {
  auto s = oracle::simulate_exponential(400, 0.8, 0.3, 11);
  Rng rng(12);
  std::normal_distribution<double> g;
  RowMatrixD x(400, 6);
  for (int i = 0; i < 400; ++i) {
    for (int j = 0; j < 6; ++j) x(i, j) = g(rng);
    x(i, 4) = s.x[static_cast<std::size_t>(i)];
    x(i, 5) = 1.0;
  }
  auto rows = cox_screen(x, s.times, s.events);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].feature_id == 4);
  CHECK(rows[0].significant_bonferroni);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].p_value >= rows[i - 1].p_value);
  CHECK(rows.back().feature_id == 5);
  CHECK(rows.back().p_value == 1.0);
  CHECK(!rows.back().converged);
  // 0.05 / 3072 ~ 1.627e-5
  CHECK(0.05 / 3072 == doctest::Approx(1.627e-5).epsilon(1e-3));
}

TEST_CASE("k sensitivity emits one row per K plus dense per task") {
  auto c = testutil::small_cohort(150, 3);
  auto w = testutil::small_model(c.vocabulary.size());
  SaeConfig base;
  base.width = 32;
  base.expansion = 2;
  base.steps = 50;
  base.dead_window = 50;
  base.resample_check_every = 50;
  ProbeConfig cfg;
  cfg.bootstrap = 5;
  cfg.c_grid = {1.0};
  cfg.ridge_grid = {1.0};
  std::vector<int> ks{4, 8};
  auto rows = k_sensitivity(w, c.patients, c.vocabulary, 2, ks, base, 0, cfg);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].task == "mortality");
  CHECK(rows[0].k == 4);
  CHECK(rows[2].representation == "dense");
  CHECK(rows[5].task == "los");
}
