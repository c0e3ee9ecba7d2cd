#include "../common/oracles.hpp"
#include "helpers.hpp"

#include "saelab/sae.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace saelab;

namespace {

SaeConfig tiny_config(int width = 8, int expansion = 4, int k = 3) {
  SaeConfig c;
  c.width = width;
  c.expansion = expansion;
  c.k = k;
  c.lr = 1e-3;
  c.steps = 200;
  c.dead_window = 100;
  c.resample_check_every = 50;
  c.seed = 4;
  return c;
}

}  // namespace

TEST_CASE("initialization ties encoder to decoder") {
  auto sae = init_sae(tiny_config());
  CHECK(sae.features() == 32);
  CHECK(sae.decoder_norm_error() < 1e-5);
  CHECK((sae.w_enc - sae.w_dec.transpose()).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(sae.b_dec.isZero());
  CHECK_THROWS_AS(init_sae(tiny_config(8, 1, 9)), ConfigError);
}

TEST_CASE("topk keeps the largest entries and breaks ties by index") {
  RowMatrixF pre(2, 5);
  pre << 0.5f, 2.0f, 2.0f, -1.0f, 2.0f,
         -3.0f, -1.0f, -2.0f, -4.0f, -5.0f;
  auto z = topk_select(pre, 2);
  REQUIRE(z.rows() == 2);
  CHECK(std::vector<int>(z.row_indices(0).begin(), z.row_indices(0).end()) == std::vector<int>{1, 2});
  CHECK(z.row_values(0)[0] == 2.0f);
  // Negative survivors are clamped at zero.
  CHECK(std::vector<int>(z.row_indices(1).begin(), z.row_indices(1).end()) == std::vector<int>{1, 2});
  CHECK(z.row_values(1)[0] == 0.0f);
  auto d = z.to_dense();
  CHECK(d.rows() == 2);
  CHECK(d.cols() == 5);
  CHECK(d(0, 4) == 0.0f);
  CHECK_THROWS_AS(topk_select(pre, 6), ConfigError);
}

TEST_CASE("encode and decode check widths") {
  auto sae = init_sae(tiny_config());
  auto h = testutil::random_rows(4, 7, 1);
  CHECK_THROWS_AS(encode(sae, h), ConfigError);
  auto z = encode(sae, testutil::random_rows(4, 8, 1));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto idx = z.row_indices(r);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    for (float v : z.row_values(r)) CHECK(v >= 0.0f);
  }
  CHECK(decode(sae, z).rows() == 4);
}

TEST_CASE("analytic gradient matches finite differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto c = tiny_config(3, 2, 2);
    c.seed = seed;
    auto sae = init_sae(c);
    sae.b_enc.setConstant(0.3f);
    sae.b_dec = testutil::random_rows(1, 3, seed + 10).row(0).transpose();
    auto h = testutil::random_rows(5, 3, seed + 20);
    CHECK(oracle::gradient_max_rel_error(sae, h) <= 1e-4);
  }
}

TEST_CASE("training lowers loss and keeps unit decoder norms") {
  auto data = planted_dictionary_dataset(8, 16, 2, 2000, 0.01, 3);
  auto c = tiny_config(8, 4, 2);
  c.steps = 400;
  MatrixRowStream s(data.samples, 64, 1);
  auto r = train_sae(s, c);
  REQUIRE(r.log.rows.size() == 4);
  CHECK(r.log.rows.back().loss < r.log.rows.front().loss);
  CHECK(r.model.decoder_norm_error() < 1e-5);
  CHECK(r.log.warnings.empty());
}

TEST_CASE("training is deterministic for a seed") {
  auto data = planted_dictionary_dataset(8, 16, 2, 500, 0.01, 3);
  auto c = tiny_config(8, 4, 2);
  c.steps = 150;
  MatrixRowStream s1(data.samples, 32, 9), s2(data.samples, 32, 9);
  auto a = train_sae(s1, c);
  auto b = train_sae(s2, c);
  CHECK(a.model.w_dec == b.model.w_dec);
  CHECK(a.model.w_enc == b.model.w_enc);
  CHECK(a.model.b_enc == b.model.b_enc);
}

TEST_CASE("exhausted stream ends training with a warning") {
  auto c = tiny_config();
  c.steps = 50;
  MatrixRowStream s(testutil::random_rows(40, 8, 2), 8, 0, 10);
  auto r = train_sae(s, c);
  REQUIRE(r.log.exhausted_at_step.has_value());
  CHECK(*r.log.exhausted_at_step == 10);
  CHECK(r.log.warnings.size() == 1);
}

TEST_CASE("dead features are resampled with fresh optimizer state") {
  auto c = tiny_config();
  auto sae = init_sae(c);
  auto st = init_train_state(sae);
  auto batch = testutil::random_rows(32, 8, 5);
  st.step = 500;
  std::fill(st.last_active.begin(), st.last_active.end(), 500);
  st.last_active[3] = 0;
  st.last_active[7] = 399;
  st.m.w_dec.col(3).setConstant(1.0f);
  CHECK(dead_feature_count(sae, st) == 2);
  const int n = resample_dead(sae, st, batch);
  CHECK(n == 2);
  CHECK(dead_feature_count(sae, st) == 0);
  CHECK(st.m.w_dec.col(3).isZero());
  CHECK(sae.w_dec.col(3).norm() == doctest::Approx(1.0f));
  CHECK(sae.b_enc[7] == 0.0f);
  CHECK(resample_dead(sae, st, batch) == 0);
}

TEST_CASE("patient stream stacks whole patients") {
  std::vector<RowMatrixF> pts{testutil::random_rows(3, 4, 1), testutil::random_rows(5, 4, 2),
                              testutil::random_rows(2, 4, 3)};
  PatientStream s(pts, 2, 0);
  for (int i = 0; i < 6; ++i) {
    auto b = s.next_batch();
    REQUIRE(b.has_value());
    CHECK((b->rows() == 8 || b->rows() == 5 || b->rows() == 7));
  }
}

TEST_CASE("checkpoint round trip is exact") {
  testutil::TempDir dir("sae");
  auto c = tiny_config();
  c.seed = 12;
  auto sae = init_sae(c);
  sae.b_dec.setConstant(0.25f);
  save_sae(dir / "s.ckpt", sae);
  auto back = load_sae(dir / "s.ckpt", 8);
  CHECK(back.w_dec == sae.w_dec);
  CHECK(back.w_enc == sae.w_enc);
  CHECK(back.b_dec == sae.b_dec);
  CHECK(back.config.k == c.k);
  CHECK(back.config.seed == 12u);
  CHECK_THROWS_AS(load_sae(dir / "s.ckpt", 16), ConfigError);
  CHECK_THROWS_AS(load_sae(dir / "nope.ckpt"), MissingPrerequisite);
}
