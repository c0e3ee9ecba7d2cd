// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Pass criterion numbers as arguments to run a subset.

#include "../common/oracles.hpp"

#include "saelab/datagen.hpp"
#include "saelab/featurestats.hpp"
#include "saelab/intervene.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/pipeline.hpp"
#include "saelab/readouts.hpp"
#include "saelab/sae.hpp"

#include <fmt/core.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

using namespace saelab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

fs::path scratch_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / fmt::format("saelab_accept_{}_{}", tag, ::getpid());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::vector<int>> model_inputs(const Cohort& c) {
  std::vector<std::vector<int>> out;
  for (const auto& p : c.patients) out.push_back(input_tokens(p, c.vocabulary));
  return out;
}

SaeModel train_on_layer(const LayerActivations& acts, int expansion, int k, int steps, std::uint64_t seed) {
  SaeConfig sc;
  sc.width = static_cast<int>(acts.patients.front().cols());
  sc.expansion = expansion;
  sc.k = k;
  sc.steps = steps;
  sc.lr = 1e-3;
  sc.seed = seed;
  PatientStream st(acts.patients, 16, seed);
  return train_sae(st, sc).model;
}

// 1. Delta-mode identity ----------------------------------------------------

Outcome delta_identity() {
  constexpr int kMinPositions = 1000;
  constexpr double kMaxSeconds = 60.0;
  constexpr int kLayer = 2;
  Stopwatch clock;
  CohortConfig cc;
  cc.n_patients = 300;
  cc.planted = PlantedAssociationSpec{};
  auto cohort = generate_cohort(cc, 1);
  ModelConfig mc;
  mc.vocab_size = cohort.vocabulary.size();
  mc.seed = 1;
  auto model = init_toy_model(mc);
  auto seqs = model_inputs(cohort);
  auto acts = extract_layers(model, seqs, {kLayer});
  const auto trained = train_on_layer(acts.at(kLayer), 8, 16, 1500, 1);
  SaeConfig rc;
  rc.width = mc.width;
  rc.seed = 2;
  const auto untrained = init_sae(rc);

  std::vector<std::vector<int>> probe_seqs;
  int positions = 0;
  for (std::size_t i = 0; positions < kMinPositions && i < seqs.size(); ++i) {
    probe_seqs.push_back(seqs[i]);
    positions += static_cast<int>(seqs[i].size());
  }

  bool ok = positions >= kMinPositions;
  std::string detail;
  for (const auto* sae : {&trained, &untrained}) {
    const double ev = explained_variance(*sae, std::span<const RowMatrixF>(acts.at(kLayer).patients));
    const auto d = noise_floor(model, probe_seqs, *sae, kLayer, InterventionMode::delta);
    const auto r = noise_floor(model, probe_seqs, *sae, kLayer, InterventionMode::reconstruct);
    ok = ok && d.bit_identical && d.max_abs_logit_dev == 0.0 && d.positions >= kMinPositions;
    if (ev < 0.999) ok = ok && r.mean_abs_logit_dev > 0.0 && !r.bit_identical;
    detail += fmt::format("ev={:.4f} delta_max_dev={:.1e} recon_mean_dev={:.3e}; ", ev, d.max_abs_logit_dev,
                          r.mean_abs_logit_dev);
  }

  // Sampled continuations: 50 prefixes x 20 generated tokens.
  const auto ones = make_spec(kLayer, InterventionMode::delta, trained.features(), {}, 0.0);
  const auto hook = make_hook(trained, ones);
  int generated = 0, mismatched = 0;
  for (int i = 0; i < 50; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    std::vector<int> prefix(s.begin(), s.begin() + std::min<std::size_t>(12, s.size()));
    GenerationOptions g;
    g.n_steps = 20;
    g.seed = derive_seed(9, static_cast<std::uint64_t>(i));
    const auto a = generate_continuation(model, prefix, g);
    const auto b = generate_continuation(model, prefix, g, hook);
    generated += static_cast<int>(a.size());
    mismatched += a != b;
  }
  const double secs = clock.seconds();
  ok = ok && mismatched == 0 && generated >= kMinPositions && secs < kMaxSeconds;
  detail += fmt::format("positions={} generated={} mismatched_runs={} time={:.1f}s", positions, generated,
                        mismatched, secs);
  return {ok, detail};
}

// 2. Planted dictionary recovery -------------------------------------------

Outcome planted_recovery() {
  constexpr double kMinMatched = 0.8;
  constexpr double kCosine = 0.9;
  constexpr double kMaxSeconds = 600.0;
  Stopwatch clock;
  const auto data = planted_dictionary_dataset(32, 64, 4, 50000, 0.01, 0);
  SaeConfig c;
  c.width = 32;
  c.expansion = 4;
  c.k = 4;
  c.steps = 10000;
  c.lr = 1e-3;
  c.seed = 0;
  MatrixRowStream stream(data.samples, 256, 0);
  const auto sae = train_sae(stream, c).model;
  const MatrixF truth = data.atoms.transpose();
  const auto m = match_features(truth, sae.w_dec, kCosine);
  const double secs = clock.seconds();
  return {m.matched_fraction >= kMinMatched && secs < kMaxSeconds,
          fmt::format("matched {:.3f} of 64 true atoms at cos>={} (F=128, K=4), time={:.1f}s", m.matched_fraction,
                      kCosine, secs)};
}

// 3. Gradient check ---------------------------------------------------------

Outcome gradient_check() {
  constexpr double kMaxRelError = 1e-4;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SaeConfig c;
    c.width = 3;
    c.expansion = 2;
    c.k = 2;
    c.seed = seed;
    auto sae = init_sae(c);
    Rng rng(seed + 100);
    std::normal_distribution<float> g(0.0f, 0.5f);
    for (int j = 0; j < 6; ++j) sae.b_enc[j] = g(rng) + 0.5f;
    for (int i = 0; i < 3; ++i) sae.b_dec[i] = g(rng);
    RowMatrixF h(8, 3);
    for (int r = 0; r < 8; ++r)
      for (int i = 0; i < 3; ++i) h(r, i) = 2.0f * g(rng);
    worst = std::max(worst, oracle::gradient_max_rel_error(sae, h));
  }
  return {worst <= kMaxRelError, fmt::format("max relative error {:.2e} over 5 seeds (3x6 SAE)", worst)};
}

// 4. K-monotonicity ---------------------------------------------------------

Outcome k_monotonicity() {
  constexpr double kMaxSpread = 0.03;
  const auto data = planted_dictionary_dataset(32, 64, 16, 35000, 0.01, 4);
  const RowMatrixF train = data.samples.topRows(30000);
  const RowMatrixF eval = data.samples.bottomRows(5000);
  auto ev_for = [&](int expansion, int k) {
    SaeConfig c;
    c.width = 32;
    c.expansion = expansion;
    c.k = k;
    c.steps = 3000;
    c.lr = 1e-3;
    c.seed = 7;
    MatrixRowStream stream(train, 256, 7);
    return explained_variance(train_sae(stream, c).model, eval);
  };
  const double k8 = ev_for(8, 8), k16 = ev_for(8, 16), k32 = ev_for(8, 32);
  const double e4 = ev_for(4, 16), e16 = ev_for(16, 16);
  const double spread = std::max({e4, k16, e16}) - std::min({e4, k16, e16});
  return {k8 < k16 && k16 < k32 && spread <= kMaxSpread,
          fmt::format("EV K8={:.4f} K16={:.4f} K32={:.4f}; e4={:.4f} e8={:.4f} e16={:.4f} spread={:.4f}", k8, k16,
                      k32, e4, k16, e16, spread)};
}

// 5. Oracle equivalence -----------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(5);
  int metric_mismatch = 0;
  for (int f = 0; f < 50; ++f) {
    const int n = 2 + static_cast<int>(rng() % 199);
    const int score_levels = 1 + static_cast<int>(rng() % 20);
    std::vector<double> s(static_cast<std::size_t>(n)), t(s.size());
    std::vector<int> y(s.size()), e(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = static_cast<double>(rng() % static_cast<std::uint64_t>(score_levels)) * 0.25;
      t[i] = static_cast<double>(1 + rng() % 30);
      y[i] = static_cast<int>(rng() % 2);
      e[i] = uniform01(rng) < 0.6 ? 1 : 0;
    }
    y[0] = 0;
    y[1] = 1;
    e[0] = 1;
    t[0] = 0.5;
    metric_mismatch += auc_roc(s, y) != oracle::auc_pairs(s, y);
    metric_mismatch += harrell_c(s, t, e) != oracle::harrell_pairs(s, t, e);
  }
  int assign_mismatch = 0, instances = 0;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rows = 1; rows <= 7; ++rows) {
    for (int cols = 1; cols <= 7; ++cols) {
      for (int rep = 0; rep < 6; ++rep) {
        MatrixD m(rows, cols);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) m(i, j) = rep % 2 ? std::round(u(rng) * 3) : u(rng);
        const auto a = hungarian_maximize(m);
        assign_mismatch += std::abs(assignment_total(m, a) - oracle::best_assignment_total(m)) > 1e-12;
        ++instances;
      }
    }
  }
  return {metric_mismatch == 0 && assign_mismatch == 0,
          fmt::format("50 fixtures: {} AUC/C mismatches; {} Hungarian instances: {} mismatches", metric_mismatch,
                      instances, assign_mismatch)};
}

// 6. Probe sanity -----------------------------------------------------------

PatientFeatureMatrix synthetic_matrix(const RowMatrixD& x, std::vector<int> labels) {
  PatientFeatureMatrix m;
  m.rows = x;
  m.died = std::move(labels);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    m.los_hours.push_back(1.0);
    m.time_to_event.push_back(1.0);
    m.patient_ids.push_back(static_cast<int>(i));
  }
  return m;
}

Outcome probe_sanity() {
  constexpr double kMinSeparableAuc = 0.99;
  constexpr int kMinCovered = 90;
  constexpr double kMinR2 = 0.999;
  Rng rng(6);
  std::normal_distribution<double> g;

  RowMatrixD xs(400, 6);
  std::vector<int> ys(400);
  for (int i = 0; i < 400; ++i) {
    ys[static_cast<std::size_t>(i)] = uniform01(rng) < 0.3;
    for (int j = 0; j < 6; ++j) xs(i, j) = g(rng);
    xs(i, 0) += ys[static_cast<std::size_t>(i)] ? 4.0 : -4.0;
  }
  const auto sep = logistic_probe(synthetic_matrix(xs, ys), 0);

  int covered = 0;
  for (int trial = 0; trial < 100; ++trial) {
    RowMatrixD x(300, 5);
    std::vector<int> y(300);
    for (int i = 0; i < 300; ++i) {
      for (int j = 0; j < 5; ++j) x(i, j) = g(rng);
      y[static_cast<std::size_t>(i)] = uniform01(rng) < 0.3;
    }
    const auto r = logistic_probe(synthetic_matrix(x, y), static_cast<std::uint64_t>(trial));
    covered += r.ci_low <= 0.5 && 0.5 <= r.ci_high && r.bootstrap_n == 500;
  }

  RowMatrixD xr(400, 8);
  std::vector<double> yr(400);
  for (int i = 0; i < 400; ++i) {
    for (int j = 0; j < 8; ++j) xr(i, j) = g(rng);
    yr[static_cast<std::size_t>(i)] = 1.5 * xr(i, 0) - 2.0 * xr(i, 4) + 0.3 * xr(i, 7) + 1.0;
  }
  const auto ridge = ridge_probe(xr, yr, 0);
  return {sep.auc >= kMinSeparableAuc && covered >= kMinCovered && ridge.r2 >= kMinR2,
          fmt::format("separable AUC={:.4f}; shuffled CI covers 0.5 in {}/100; ridge R2={:.6f}", sep.auc, covered,
                      ridge.r2)};
}

// 7. Leakage demonstration --------------------------------------------------

Outcome leakage() {
  constexpr double kMinGap = 0.05;
  constexpr double kMaxSeconds = 300.0;
  constexpr int kLayer = 2;
  Stopwatch clock;
  CohortConfig cc;
  cc.n_patients = 2000;
  cc.end_of_stay_markers = true;
  cc.vocab = desk_vocab_config(true);
  auto cohort = generate_cohort(cc, 0);
  ModelConfig mc;
  mc.vocab_size = cohort.vocabulary.size();
  mc.seed = 7;
  auto model = init_toy_model(mc);
  auto acts = extract_layers(model, model_inputs(cohort), {kLayer});
  const auto sae = train_on_layer(acts.at(kLayer), 8, 16, 1500, 0);

  std::map<std::string, double> full, windowed;
  for (auto window : {WindowSpec::full(), WindowSpec::hours(48)}) {
    std::vector<PatientRecord> recs;
    for (const auto& p : cohort.patients) recs.push_back(truncate_to_window(p, window));
    auto base = baselines(recs, cohort.vocabulary, true);
    std::vector<int> kept;
    auto states = patient_states(model, recs, cohort.vocabulary, kLayer, kept);
    auto dense = pool_from_states(Representation::dense, states, kept, recs);
    auto codes = pool_from_states(Representation::sae, states, kept, recs, &sae);
    auto& out = window.kind == WindowKind::full ? full : windowed;
    for (const auto* m : {&codes, &dense, &base.bot, &base.presence, &base.seqlen}) {
      out[to_string(m->tag)] = logistic_probe(*m, 11).auc;
    }
  }
  bool ok = true;
  std::string detail;
  for (const auto& [rep, auc] : full) {
    const double gap = auc - windowed.at(rep);
    ok = ok && gap >= kMinGap;
    detail += fmt::format("{} {:.3f}->{:.3f}; ", rep, auc, windowed.at(rep));
  }
  const double secs = clock.seconds();
  ok = ok && secs < kMaxSeconds;
  detail += fmt::format("time={:.1f}s", secs);
  return {ok, detail};
}

// 8. Cox recovery -----------------------------------------------------------

Outcome cox_recovery() {
  constexpr double kLow = 0.55, kHigh = 0.85;
  constexpr int kMinInRange = 18;
  constexpr double kMaxMeanFalsePositives = 1.0;
  int in_range = 0, false_positives = 0;
  double beta_sum = 0.0;
  for (std::uint64_t run = 0; run < 20; ++run) {
    const auto s = oracle::simulate_exponential(2000, 0.7, 0.5, derive_seed(8, run));
    const auto fit = cox_univariate(s.x, s.times, s.events);
    in_range += fit.converged && fit.beta >= kLow && fit.beta <= kHigh;
    beta_sum += fit.beta;

    Rng rng(derive_seed(80, run));
    std::normal_distribution<double> g;
    RowMatrixD noise(2000, 512);
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = g(rng);
    for (const auto& r : cox_screen(noise, s.times, s.events)) false_positives += r.significant_bonferroni;
  }
  const double mean_fp = false_positives / 20.0;
  return {in_range >= kMinInRange && mean_fp <= kMaxMeanFalsePositives,
          fmt::format("beta in [{}, {}] in {}/20 runs (mean {:.3f}); noise false positives per run {:.2f}", kLow,
                      kHigh, in_range, beta_sum / 20.0, mean_fp)};
}

// 9. Intervention directionality --------------------------------------------

Outcome intervention_direction() {
  constexpr int kLayer = 2;
  constexpr int kMinSeeds = 7;
  int negative = 0, beats_random = 0, with_targets = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CohortConfig cc;
    cc.n_patients = 600;
    cc.planted = PlantedAssociationSpec{"MED:WARFARIN", "LAB:INR:Q5", 1.0};
    auto cohort = generate_cohort(cc, seed);
    ModelConfig mc;
    mc.vocab_size = cohort.vocabulary.size();
    mc.seed = derive_seed(seed, 7);
    auto model = init_toy_model(mc);
    plant_embedding_association(model, cohort.planted->treatment_token, cohort.planted->outcome_token_high, 0.7);
    auto acts = extract_layers(model, model_inputs(cohort), {kLayer});
    const auto& layer = acts.at(kLayer);
    const auto sae = train_on_layer(layer, 8, 8, 1500, seed);
    ProfileAccumulator profiles(sae.features());
    for (std::size_t i = 0; i < layer.patients.size(); ++i) profiles.add(encode(sae, layer.patients[i]), layer.tokens[i]);
    const auto ps = profiles.profiles(cohort.vocabulary);
    const auto targets = features_with_top_token(ps, cohort.planted->outcome_token_high);
    if (targets.empty()) {
      detail += fmt::format("s{}:no-targets ", seed);
      continue;
    }
    ++with_targets;
    const auto spec = make_spec(kLayer, InterventionMode::delta, sae.features(), targets, 1.0);
    DiDConfig dc;
    dc.n_patients = 40;
    dc.n_samples = 30;
    dc.n_steps = 4;
    dc.seed = seed;
    const auto ens = control_comparison(model, cohort, *cohort.planted, sae, spec, 10, dc);
    negative += ens.targeted_delta < 0.0;
    beats_random += std::abs(ens.targeted_delta) > std::abs(ens.random_mean);
    detail += fmt::format("s{}:{:+.3f}/{:+.4f} ", seed, ens.targeted_delta, ens.random_mean);
  }
  return {negative >= kMinSeeds && beats_random >= kMinSeeds,
          fmt::format("dDiD<0 in {}/10, |targeted|>|random mean| in {}/10 [{}]", negative, beats_random, detail)};
}

// 10. Determinism -----------------------------------------------------------

Outcome determinism() {
  std::vector<fs::path> dirs{scratch_dir("det_a"), scratch_dir("det_b")};
  for (const auto& d : dirs) {
    auto m = default_config_map();
    m["run.out"] = d.string();
    run_all(resolve_config(m));
  }
  int compared = 0, differing = 0;
  std::string which;
  for (const auto& entry : fs::recursive_directory_iterator(dirs[0])) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    const auto rel = fs::relative(entry.path(), dirs[0]);
    ++compared;
    if (!fs::exists(dirs[1] / rel) || sha256_file(entry.path()) != sha256_file(dirs[1] / rel)) {
      ++differing;
      which += rel.string() + " ";
    }
  }
  for (const auto& d : dirs) fs::remove_all(d);
  return {compared > 0 && differing == 0,
          fmt::format("{} result CSVs compared, {} differ {}", compared, differing, which)};
}

// 11. Complexity fixtures ---------------------------------------------------

Outcome complexity_fixtures() {
  constexpr double kTol = 1e-12;
  const auto f = oracle::complexity_fixture();
  std::vector<FeatureProfile> profiles;
  for (std::size_t j = 0; j < f.masses.size(); ++j)
    profiles.push_back(profile_from_masses(static_cast<int>(j), f.masses[j], f.vocab));
  bool ok = true;
  for (std::size_t j = 0; j < f.entropies.size(); ++j)
    ok = ok && std::abs(profiles[j].category_entropy_nats - f.entropies[j]) <= kTol;
  ok = ok && std::abs(profiles[1].category_entropy_nats - std::log(2.0)) <= kTol;
  const auto r = complexity_summary(profiles);
  ok = ok && std::abs(r.singleton_pct - f.singleton_pct) <= kTol &&
       std::abs(r.mean_tokens_per_feature - f.mean_tokens) <= kTol &&
       std::abs(r.single_category_pct - f.single_category_pct) <= kTol &&
       std::abs(r.mean_category_entropy - f.mean_entropy) <= kTol && r.n_features_active == 5;
  return {ok, fmt::format("singleton={:.1f}% tokens={:.3f} single_cat={:.1f}% entropy={:.6f} (two-category {:.6f})",
                          r.singleton_pct, r.mean_tokens_per_feature, r.single_category_pct,
                          r.mean_category_entropy, profiles[1].category_entropy_nats)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"delta-mode identity", delta_identity},
      {"planted dictionary recovery", planted_recovery},
      {"gradient check", gradient_check},
      {"K-monotonicity", k_monotonicity},
      {"oracle equivalence", oracle_equivalence},
      {"probe sanity", probe_sanity},
      {"leakage demonstration", leakage},
      {"Cox recovery", cox_recovery},
      {"intervention directionality", intervention_direction},
      {"determinism", determinism},
      {"complexity fixtures", complexity_fixtures},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    Stopwatch clock;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    fmt::print("{} {:2d} {}: {} [{:.1f}s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail,
               clock.seconds());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
