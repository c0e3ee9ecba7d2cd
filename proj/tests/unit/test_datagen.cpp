#include "helpers.hpp"

#include "saelab/datagen.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

using namespace saelab;

namespace {

// Share of treatment occurrences followed by the outcome within 5 tokens.
double outcome_follow_rate(const Cohort& c) {
  int treated = 0, followed = 0;
  for (const auto& p : c.patients) {
    for (std::size_t t = 0; t < p.token_ids.size(); ++t) {
      if (p.token_ids[t] != c.planted->treatment_token) continue;
      ++treated;
      for (std::size_t u = t + 1; u <= t + 5 && u < p.token_ids.size(); ++u) {
        if (p.token_ids[u] == c.planted->outcome_token_high) {
          ++followed;
          break;
        }
      }
    }
  }
  return treated == 0 ? 0.0 : static_cast<double>(followed) / treated;
}

}  // namespace

TEST_CASE("full-scale vocabulary has 239 tokens") {
  auto v = build_vocabulary(full_scale_vocab_config());
  CHECK(v.size() == 239);
  CHECK(v.category_of(v.death_id()) == "SPECIAL");
  CHECK(v.is_special(v.pad_id()));
  CHECK(v.category_of(v.id_of("LAB:INR:Q3")) == "LAB");
  CHECK_THROWS_AS(v.id_of("LAB:NOPE:Q1"), ConfigError);
}

TEST_CASE("vocabulary rejects duplicates and missing death token") {
  CHECK_THROWS_AS(Vocabulary({"[DEATH]", "[PAD]", "MED:A", "MED:A"}), ConfigError);
  CHECK_THROWS_AS(Vocabulary({"[PAD]", "MED:A"}), ConfigError);
  CHECK(category_label("DX:SEPSIS") == "DX");
  CHECK(category_label("[DEATH]") == "SPECIAL");
}

TEST_CASE("vocabulary file round trip") {
  testutil::TempDir dir("vocab");
  auto v = build_vocabulary(desk_vocab_config(true));
  write_vocabulary(dir / "v.tsv", v);
  auto back = read_vocabulary(dir / "v.tsv");
  CHECK(back.tokens() == v.tokens());
  CHECK_THROWS_AS(read_vocabulary(dir / "missing.tsv"), MissingPrerequisite);
}

TEST_CASE("cohort generation is deterministic per seed") {
  auto a = testutil::small_cohort(80, 11);
  auto b = testutil::small_cohort(80, 11);
  auto c = testutil::small_cohort(80, 12);
  REQUIRE(a.patients.size() == 80);
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < a.patients.size(); ++i) {
    all_same = all_same && a.patients[i].token_ids == b.patients[i].token_ids &&
               a.patients[i].time_deltas == b.patients[i].time_deltas && a.patients[i].died == b.patients[i].died;
    any_diff = any_diff || a.patients[i].token_ids != c.patients[i].token_ids;
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("cohort invariants") {
  CohortConfig cc;
  cc.n_patients = 2000;
  auto c = generate_cohort(cc, 1);
  int deaths = 0;
  for (const auto& p : c.patients) {
    REQUIRE(!p.token_ids.empty());
    REQUIRE(p.token_ids.size() == p.time_deltas.size());
    CHECK(p.time_deltas[0] == 0.0);
    for (double d : p.time_deltas) REQUIRE(d >= 0.0);
    const bool has_death = std::find(p.token_ids.begin(), p.token_ids.end(), c.vocabulary.death_id()) !=
                           p.token_ids.end();
    CHECK(has_death == p.died);
    if (p.died) CHECK(p.token_ids.back() == c.vocabulary.death_id());
    CHECK(p.los_hours > 0.0);
    deaths += p.died;
  }
  CHECK(std::abs(deaths / 2000.0 - cc.mortality_rate) <= 0.01);

  // Deaths are the most severe patients.
  double min_dead = 1e9, max_alive = -1e9;
  for (std::size_t i = 0; i < c.patients.size(); ++i) {
    if (c.patients[i].died) min_dead = std::min(min_dead, c.latent_severity[i]);
    else max_alive = std::max(max_alive, c.latent_severity[i]);
  }
  CHECK(min_dead >= max_alive);
}

TEST_CASE("high lab quintiles are more frequent in deaths") {
  CohortConfig cc;
  cc.n_patients = 1500;
  auto c = generate_cohort(cc, 2);
  auto q5_share = [&](bool died) {
    double q5 = 0, labs = 0;
    for (const auto& p : c.patients) {
      if (p.died != died) continue;
      for (int t : p.token_ids) {
        const auto& s = c.vocabulary.token(t);
        if (s.rfind("LAB:", 0) != 0) continue;
        ++labs;
        q5 += s.size() > 3 && s.substr(s.size() - 3) == ":Q5";
      }
    }
    return q5 / labs;
  };
  CHECK(q5_share(true) > q5_share(false) + 0.05);
}

TEST_CASE("end-of-stay markers precede the terminal event") {
  auto c = testutil::small_cohort(300, 4, true);
  int dead_marked = 0, dead = 0;
  for (const auto& p : c.patients) {
    if (!p.died) continue;
    ++dead;
    const int before = p.token_ids[p.token_ids.size() - 2];
    dead_marked += c.vocabulary.category_of(before) == "END";
  }
  REQUIRE(dead > 0);
  CHECK(dead_marked >= dead / 2);
}

TEST_CASE("planted effect is monotone in effect size") {
  double prev = -1.0;
  for (double e : {0.0, 0.25, 0.5, 1.0}) {
    CohortConfig cc;
    cc.n_patients = 800;
    cc.treatment_rate = 0.05;
    cc.planted = PlantedAssociationSpec{"MED:WARFARIN", "LAB:INR:Q5", e};
    const double r = outcome_follow_rate(generate_cohort(cc, 9));
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev > 0.9);
}

TEST_CASE("generator validates its configuration") {
  CohortConfig cc;
  cc.n_patients = 0;
  CHECK_THROWS_AS(generate_cohort(cc, 0), ConfigError);
  cc = CohortConfig{};
  cc.mortality_rate = 1.0;
  CHECK_THROWS_AS(generate_cohort(cc, 0), ConfigError);
  cc = CohortConfig{};
  cc.planted = PlantedAssociationSpec{"MED:WARFARIN", "LAB:INR:Q5", 1.5};
  CHECK_THROWS_AS(generate_cohort(cc, 0), ConfigError);
  cc = CohortConfig{};
  cc.min_events = 10;
  cc.max_events = 5;
  CHECK_THROWS_AS(generate_cohort(cc, 0), ConfigError);
}

TEST_CASE("input tokens drop the death token") {
  auto c = testutil::small_cohort(200, 5);
  for (const auto& p : c.patients) {
    auto in = input_tokens(p, c.vocabulary);
    CHECK(in.size() == p.token_ids.size() - (p.died ? 1 : 0));
    CHECK(std::find(in.begin(), in.end(), c.vocabulary.death_id()) == in.end());
  }
}

TEST_CASE("cohort file round trip") {
  testutil::TempDir dir("cohort");
  auto c = testutil::small_cohort(60, 6);
  write_cohort(dir / "c.tsv", c);
  auto back = read_cohort(dir / "c.tsv", c.vocabulary);
  REQUIRE(back.patients.size() == c.patients.size());
  for (std::size_t i = 0; i < c.patients.size(); ++i) {
    CHECK(back.patients[i].token_ids == c.patients[i].token_ids);
    CHECK(back.patients[i].died == c.patients[i].died);
    CHECK(back.patients[i].demographics == c.patients[i].demographics);
    for (std::size_t t = 0; t < c.patients[i].time_deltas.size(); ++t)
      CHECK(back.patients[i].time_deltas[t] == doctest::Approx(c.patients[i].time_deltas[t]).epsilon(1e-12));
  }
  REQUIRE(back.planted.has_value());
  CHECK(back.planted->treatment_token == c.planted->treatment_token);

  std::ofstream(dir / "bad.tsv") << "# saelab cohort\n0\t1\n";
  CHECK_THROWS_AS(read_cohort(dir / "bad.tsv", c.vocabulary), FormatError);
}

TEST_CASE("planted dictionary dataset") {
  auto d = planted_dictionary_dataset(32, 64, 4, 500, 0.01, 7);
  CHECK(d.atoms.rows() == 64);
  CHECK(d.samples.rows() == 500);
  for (int i = 0; i < 64; ++i) CHECK(d.atoms.row(i).norm() == doctest::Approx(1.0).epsilon(1e-5));
  for (int r = 0; r < 500; ++r) {
    int nz = 0;
    for (int j = 0; j < 64; ++j) {
      if (d.codes(r, j) > 0) {
        ++nz;
        CHECK(d.codes(r, j) >= kPlantedCodeLow);
        CHECK(d.codes(r, j) <= kPlantedCodeHigh);
      }
    }
    CHECK(nz == 4);
  }
  RowMatrixF clean = d.codes * d.atoms;
  CHECK((d.samples - clean).array().abs().maxCoeff() < 0.1);
  CHECK_THROWS_AS(planted_dictionary_dataset(32, 4, 8, 10, 0.0, 0), ConfigError);
}
