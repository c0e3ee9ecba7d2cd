#include "../common/oracles.hpp"
#include "helpers.hpp"

#include "saelab/featurestats.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <sstream>

using namespace saelab;

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

SaeModel trained_sae(const RowMatrixF& rows, int expansion, int k, int steps, std::uint64_t seed) {
  SaeConfig c;
  c.width = static_cast<int>(rows.cols());
  c.expansion = expansion;
  c.k = k;
  c.lr = 2e-3;
  c.steps = steps;
  c.seed = seed;
  MatrixRowStream s(rows, 64, seed);
  return train_sae(s, c).model;
}

}  // namespace

TEST_CASE("streaming explained variance matches the two-pass formula") {
  auto sae = init_sae([] { SaeConfig c; c.width = 6; c.expansion = 2; c.k = 3; return c; }());
  std::vector<RowMatrixF> batches;
  for (int b = 0; b < 5; ++b) batches.push_back(testutil::random_rows(7 + b * 3, 6, 40 + b, 1.0f + b));
  RowMatrixF all(0, 6);
  for (const auto& b : batches) {
    RowMatrixF next(all.rows() + b.rows(), 6);
    next << all, b;
    all = next;
  }
  const double expected = oracle::explained_variance(all, reconstruct(sae, all));
  CHECK(explained_variance(sae, batches) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(explained_variance(sae, all) == doctest::Approx(expected).epsilon(1e-9));

  ExplainedVarianceAccumulator acc(6);
  acc.add(all, all);
  CHECK(acc.value() == 1.0);
  ExplainedVarianceAccumulator flat(6);
  RowMatrixF c = RowMatrixF::Constant(4, 6, 2.0f);
  flat.add(c, c);
  CHECK_THROWS_AS(flat.value(), NumericalError);
}

TEST_CASE("complexity metrics on hand-built histograms") {
  auto f = oracle::complexity_fixture();
  std::vector<FeatureProfile> profiles;
  for (std::size_t j = 0; j < f.masses.size(); ++j)
    profiles.push_back(profile_from_masses(static_cast<int>(j), f.masses[j], f.vocab));
  for (std::size_t j = 0; j < f.entropies.size(); ++j)
    CHECK(profiles[j].category_entropy_nats == doctest::Approx(f.entropies[j]).epsilon(1e-12));
  CHECK(profiles[1].category_entropy_nats == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(profiles[4].singleton);
  CHECK(profiles[4].top_token == f.vocab.id_of("MED:X"));
  CHECK(profiles[3].top_token == f.vocab.id_of("DX:Z"));
  CHECK(profiles[5].total_mass == 0.0);

  auto r = complexity_summary(profiles);
  CHECK(r.n_features_active == 5);
  CHECK(r.singleton_pct == doctest::Approx(f.singleton_pct));
  CHECK(r.mean_tokens_per_feature == doctest::Approx(f.mean_tokens));
  CHECK(r.single_category_pct == doctest::Approx(f.single_category_pct));
  CHECK(r.mean_category_entropy == doctest::Approx(f.mean_entropy).epsilon(1e-12));
  CHECK(r.coherent_pct == doctest::Approx(f.coherent_pct));
  CHECK(r.concentrated_pct == doctest::Approx(f.concentrated_pct));
}

TEST_CASE("complexity edge cases") {
  auto f = oracle::complexity_fixture();
  std::vector<FeatureProfile> silent{profile_from_masses(0, {}, f.vocab)};
  CHECK_THROWS_AS(complexity_summary(silent), NumericalError);
  CHECK_THROWS_AS(profile_from_masses(0, f.masses[0], f.vocab, 0.5), ConfigError);
  // Equal-mass top tokens resolve to the lower id.
  auto p = profile_from_masses(0, {{5, 1.0}, {4, 1.0}}, f.vocab);
  CHECK(p.top_token == 4);
  // Without a floor the small token counts.
  auto q = profile_from_masses(0, f.masses[4], f.vocab, 0.0);
  CHECK(q.n_token_types == 2);
}

TEST_CASE("profile accumulator sums activation mass per token") {
  auto f = oracle::complexity_fixture();
  SparseCode code;
  code.n_features = 3;
  code.k = 1;
  code.indices = {0, 0, 1, 2};
  code.values = {1.5f, 0.5f, 2.0f, 0.0f};
  ProfileAccumulator acc(3);
  std::vector<std::uint32_t> toks{2, 4, 4, 6};
  acc.add(code, toks);
  auto ps = acc.profiles(f.vocab);
  CHECK(ps[0].total_mass == doctest::Approx(2.0));
  CHECK(ps[0].token_mass.at(2) == doctest::Approx(1.5));
  CHECK(ps[1].singleton);
  CHECK(ps[2].total_mass == 0.0);
  CHECK(acc.total_mass() == doctest::Approx(4.0));
  std::vector<std::uint32_t> short_toks{2};
  CHECK_THROWS_AS(acc.add(code, short_toks), ConfigError);

  auto js = nlohmann::json::parse(profiles_to_json(ps, f.vocab, 1));
  REQUIRE(js.size() == 1);
}

TEST_CASE("hungarian matches exhaustive search") {
  saelab::Rng rng(123);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int checked = 0;
  for (int rows = 1; rows <= 7; ++rows) {
    for (int cols = 1; cols <= 7; ++cols) {
      for (int rep = 0; rep < 3; ++rep) {
        MatrixD s(rows, cols);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) s(i, j) = rep == 2 ? std::round(u(rng) * 2) : u(rng);
        auto a = hungarian_maximize(s);
        REQUIRE(static_cast<int>(a.size()) == rows);
        std::set<int> used;
        int assigned = 0;
        for (int c : a) {
          if (c < 0) continue;
          ++assigned;
          CHECK(used.insert(c).second);
        }
        CHECK(assigned == std::min(rows, cols));
        const double best = oracle::best_assignment_total(s);
        CHECK(assignment_total(s, a) == doctest::Approx(best).epsilon(1e-12));
        CHECK(assignment_total(s, greedy_maximize(s)) <= best + 1e-12);
        ++checked;
      }
    }
  }
  CHECK(checked == 147);
}

TEST_CASE("matching recovers a permuted dictionary") {
  MatrixF a = testutil::random_rows(12, 8, 5).transpose();
  a.colwise().normalize();
  std::vector<int> perm{3, 7, 1, 0, 11, 2, 9, 4, 6, 10, 5, 8};
  MatrixF b(8, 12);
  for (int j = 0; j < 12; ++j) b.col(perm[static_cast<std::size_t>(j)]) = a.col(j);
  auto m = match_features(a, b, 0.99);
  for (int j = 0; j < 12; ++j) CHECK(m.assignment[static_cast<std::size_t>(j)] == perm[static_cast<std::size_t>(j)]);
  CHECK(m.matched_fraction == 1.0);
  CHECK(m.mean_matched_cosine == doctest::Approx(1.0));
  auto cos = column_cosines(a, b);
  CHECK(cos.maxCoeff() <= 1.0);
  CHECK_THROWS_AS(match_features(a, b, 0.0), ConfigError);
  CHECK_THROWS_AS(match_features(a, MatrixF(a.topRows(4)), 0.5), ConfigError);
}

TEST_CASE("cross-seed report has one row per pair plus pooled") {
  testutil::TempDir dir("xseed");
  auto rows = planted_dictionary_dataset(8, 16, 2, 1500, 0.01, 1).samples;
  std::vector<SaeModel> models;
  for (std::uint64_t s = 0; s < 3; ++s) models.push_back(trained_sae(rows, 2, 2, 300, s));
  auto rep = cross_seed_report(models, 0.7);
  REQUIRE(rep.pairs.size() == 3);
  CHECK(rep.pairs[0].seed_a == 0);
  CHECK(rep.pairs[2].seed_a == 1);
  CHECK(rep.pooled_fraction >= 0.0);
  CHECK(rep.pooled_fraction <= 1.0);
  write_cross_seed_csv(dir / "x.csv", rep);
  auto lines = read_lines(dir / "x.csv");
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "row,seed_a,seed_b,matched_fraction,mean_matched_cosine,threshold");
  CHECK(lines[4].rfind("pooled,", 0) == 0);
}

TEST_CASE("layer sweep produces one row per layer") {
  testutil::TempDir dir("sweep");
  auto cohort = testutil::small_cohort(60, 2);
  auto model = testutil::small_model(cohort.vocabulary.size());
  std::vector<std::vector<int>> seqs;
  for (const auto& p : cohort.patients) seqs.push_back(input_tokens(p, cohort.vocabulary));
  auto acts = extract_layers(model, seqs, {0, 2, 5});
  REQUIRE(acts.size() == 3);
  CHECK(acts.at(2).patients.size() == 60);
  SaeConfig c;
  c.width = 32;
  c.expansion = 2;
  c.k = 4;
  c.steps = 60;
  c.dead_window = 50;
  c.resample_check_every = 50;
  std::vector<int> sunk;
  auto rows = layer_sweep(acts, cohort.vocabulary, c, SweepOptions{}, [&](int l, const SaeModel&) { sunk.push_back(l); });
  REQUIRE(rows.size() == 3);
  CHECK(sunk == std::vector<int>{0, 2, 5});
  for (const auto& r : rows) {
    CHECK(r.error.empty());
    CHECK(r.ev < 1.0);
    CHECK(r.complexity.n_features_active > 0);
  }
  write_layer_sweep_csv(dir / "s.csv", rows);
  auto lines = read_lines(dir / "s.csv");
  CHECK(lines.size() == 4);
  CHECK(lines[0] == "layer,ev,singleton_pct,mean_tokens,single_cat_pct,entropy_nats,coherent_pct,concentrated_pct");

  // Same inputs, same outputs.
  auto again = layer_sweep(acts, cohort.vocabulary, c, SweepOptions{});
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(again[i].ev == rows[i].ev);
}

TEST_CASE("hyperparameter sweep covers the grid") {
  auto data = planted_dictionary_dataset(8, 16, 2, 1000, 0.01, 2);
  SaeConfig base;
  base.width = 8;
  base.steps = 100;
  base.dead_window = 100;
  base.resample_check_every = 50;
  std::vector<HyperparamCell> grid{{2, 2}, {2, 4}, {4, 2}};
  auto rows = hyperparam_sweep([&] { return std::make_unique<MatrixRowStream>(data.samples, 32, 0); },
                               data.samples, grid, base, [](const SaeModel& m) { return m.features() / 100.0; });
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].features == 32);
  CHECK(rows[2].probe_auc == doctest::Approx(0.32));
  CHECK(rows[1].k == 4);
  CHECK(rows[0].ev < 1.0);
}
