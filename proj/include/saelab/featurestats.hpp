#pragma once

#include "saelab/common.hpp"
#include "saelab/datagen.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/sae.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace saelab {

// ---------------------------------------------------------------------------
// Explained variance
// ---------------------------------------------------------------------------

/// Streaming accumulator for EV = 1 - SSE / SST. SST uses per-dimension
/// Welford updates, merged batch by batch (Chan et al.).
class ExplainedVarianceAccumulator {
 public:
  explicit ExplainedVarianceAccumulator(int width);
  void add(const RowMatrixF& h, const RowMatrixF& h_hat);
  /// Throws NumericalError("degenerate variance") when SST == 0.
  double value() const;
  std::int64_t count() const { return n_; }
  double sse() const { return sse_; }
  double sst() const { return m2_.sum(); }

 private:
  std::int64_t n_ = 0;
  VectorD mean_;
  VectorD m2_;
  double sse_ = 0.0;
};

double explained_variance(const SaeModel& sae, std::span<const RowMatrixF> batches);
double explained_variance(const SaeModel& sae, ActivationStream& stream, int max_batches);
double explained_variance(const SaeModel& sae, const RowMatrixF& rows);

// ---------------------------------------------------------------------------
// Feature profiles
// ---------------------------------------------------------------------------

struct FeatureProfile {
  int feature_id = 0;
  std::map<int, double> token_mass;  // unfiltered
  double total_mass = 0.0;
  int n_token_types = 0;             // after mass_floor filtering
  int top_token = -1;
  double top1_fraction = 0.0;        // of filtered mass
  std::map<std::string, double> category_mass;  // filtered
  double category_entropy_nats = 0.0;
  bool singleton = false;
  bool single_category = false;
  bool coherent_50 = false;     // top category > 50% of mass
  bool concentrated_80 = false; // top category > 80% of mass
};

inline constexpr double kDefaultMassFloor = 0.01;

/// Builds a profile from a token -> mass histogram. Token types below
/// mass_floor of the feature's total mass are dropped before counting.
FeatureProfile profile_from_masses(int feature_id, const std::map<int, double>& token_mass,
                                   const Vocabulary& vocab, double mass_floor = kDefaultMassFloor);

/// Accumulates activation mass per (feature, token) over all positions.
class ProfileAccumulator {
 public:
  explicit ProfileAccumulator(int n_features) : masses_(static_cast<std::size_t>(n_features)) {}
  void add(const SparseCode& code, std::span<const std::uint32_t> token_ids);
  std::vector<FeatureProfile> profiles(const Vocabulary& vocab, double mass_floor = kDefaultMassFloor) const;
  double total_mass() const;

 private:
  std::vector<std::map<int, double>> masses_;
};

std::vector<FeatureProfile> feature_profiles(const SaeModel& sae, std::span<const ActivationBatch> batches,
                                             const Vocabulary& vocab, double mass_floor = kDefaultMassFloor);

struct ComplexityReport {
  double singleton_pct = 0.0;
  double mean_tokens_per_feature = 0.0;
  double single_category_pct = 0.0;
  double mean_category_entropy = 0.0;
  double coherent_pct = 0.0;
  double concentrated_pct = 0.0;
  int n_features_active = 0;
};

/// Aggregates over features with positive mass; throws when none have mass.
ComplexityReport complexity_summary(std::span<const FeatureProfile> profiles);

/// JSON dump of the top_n features by total mass.
std::string profiles_to_json(std::span<const FeatureProfile> profiles, const Vocabulary& vocab, int top_n);

// ---------------------------------------------------------------------------
// Assignment and stability
// ---------------------------------------------------------------------------

/// Maximum-weight assignment of rows to columns (Kuhn-Munkres with
/// potentials, O(n^2 m)). When rows > cols, some rows stay unassigned (-1).
std::vector<int> hungarian_maximize(const MatrixD& score);
/// Greedy baseline: repeatedly take the largest remaining entry.
std::vector<int> greedy_maximize(const MatrixD& score);
double assignment_total(const MatrixD& score, std::span<const int> assignment);

struct MatchResult {
  std::vector<int> assignment;  // column of A -> column of B (or -1)
  std::vector<double> cosines;  // per A column; NaN when unassigned
  double matched_fraction = 0.0;
  double mean_matched_cosine = 0.0;
  double threshold = 0.0;
};

/// Cosine matrix between columns of two d x F dictionaries.
MatrixD column_cosines(const MatrixF& dec_a, const MatrixF& dec_b);

/// matched_fraction = share of assigned pairs with cosine >= threshold.
MatchResult match_features(const MatrixF& dec_a, const MatrixF& dec_b, double threshold);

struct SeedPairRow {
  int seed_a = 0;
  int seed_b = 0;
  double matched_fraction = 0.0;
  double mean_matched_cosine = 0.0;
};

struct CrossSeedReport {
  std::vector<SeedPairRow> pairs;
  /// Share of the first model's features matched at or above threshold in
  /// every pair that involves the first model.
  double pooled_fraction = 0.0;
  double threshold = 0.0;
};

CrossSeedReport cross_seed_report(std::span<const SaeModel> models, double threshold);
void write_cross_seed_csv(const std::filesystem::path& path, const CrossSeedReport& report);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Per-patient activations for one extraction layer.
struct LayerActivations {
  int layer = 0;
  std::vector<RowMatrixF> patients;  // one matrix per patient
  std::vector<std::vector<std::uint32_t>> tokens;
};

/// One forward pass per patient collecting every requested layer.
std::map<int, LayerActivations> extract_layers(const ModelWeights& weights,
                                               std::span<const std::vector<int>> sequences,
                                               const std::set<int>& layers);

struct LayerSweepRow {
  int layer = 0;
  double ev = 0.0;
  ComplexityReport complexity;
  std::string error;  // nonempty when the cell failed
};

struct SweepOptions {
  double train_fraction = 0.8;  // patients used for SAE training; rest evaluated
  double mass_floor = kDefaultMassFloor;
  int jobs = 1;
};

/// Trains one SAE per layer (same config and seed), evaluates EV and
/// complexity on held-out patients. Optional sink receives each model.
std::vector<LayerSweepRow> layer_sweep(const ModelWeights& weights, const Cohort& cohort,
                                       const SaeConfig& sae_config, std::span<const int> layers,
                                       const SweepOptions& options,
                                       const std::function<void(int, const SaeModel&)>& sink = {});

/// Same sweep over precomputed per-patient activations (patients aligned
/// across layers).
std::vector<LayerSweepRow> layer_sweep(const std::map<int, LayerActivations>& activations, const Vocabulary& vocab,
                                       const SaeConfig& sae_config, const SweepOptions& options,
                                       const std::function<void(int, const SaeModel&)>& sink = {});

void write_layer_sweep_csv(const std::filesystem::path& path, std::span<const LayerSweepRow> rows);

struct HyperparamCell {
  int expansion = 0;
  int k = 0;
};

struct HyperparamRow {
  int expansion = 0;
  int k = 0;
  int features = 0;
  double ev = 0.0;
  double probe_auc = 0.0;  // NaN without a probe scorer
};

/// Trains one SAE per grid cell on the same stream factory and seed.
std::vector<HyperparamRow> hyperparam_sweep(
    const std::function<std::unique_ptr<ActivationStream>()>& make_stream, const RowMatrixF& eval_rows,
    std::span<const HyperparamCell> grid, const SaeConfig& base,
    const std::function<double(const SaeModel&)>& probe_auc = {}, int jobs = 1);

void write_hyperparam_csv(const std::filesystem::path& path, std::span<const HyperparamRow> rows);

}  // namespace saelab
