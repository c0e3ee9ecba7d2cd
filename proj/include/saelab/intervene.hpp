#pragma once

#include "saelab/common.hpp"
#include "saelab/datagen.hpp"
#include "saelab/featurestats.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace saelab {

enum class InterventionMode { delta, reconstruct };

std::string to_string(InterventionMode mode);
InterventionMode parse_intervention_mode(const std::string& text);

struct InterventionSpec {
  int layer = 0;
  InterventionMode mode = InterventionMode::delta;
  VectorF mask;                  // F entries in [0, 1]
  std::set<int> target_features;
  double alpha = 0.0;
  std::optional<VectorF> scales;

  void validate(int n_features) const;
  bool is_identity() const { return (mask.array() == 1.0f).all(); }
};

/// h + W_dec((m - 1) * z) with z = encode(h). This is the difference of the
/// masked and unmasked decodes with b_dec cancelled, so untouched inputs
/// (all-ones mask, or only inactive features masked) come back bit-exact.
void apply_delta_rows(Eigen::Ref<RowMatrixF> h, const SaeModel& sae, const VectorF& mask);
Eigen::RowVectorXf apply_delta(const Eigen::RowVectorXf& h, const SaeModel& sae, const VectorF& mask);

/// W_dec(z * m) + b_dec.
void apply_reconstruct_rows(Eigen::Ref<RowMatrixF> h, const SaeModel& sae, const VectorF& mask);
Eigen::RowVectorXf apply_reconstruct(const Eigen::RowVectorXf& h, const SaeModel& sae, const VectorF& mask);

/// m_i = 1 - alpha * sigma_i on targets (clamped to [0, 1]), 1 elsewhere.
/// Without scales every sigma_i is 1. Clamping appends to `warnings`.
VectorF attenuation_mask(int n_features, const std::set<int>& targets, double alpha,
                         const std::optional<VectorF>& scales = std::nullopt,
                         std::vector<std::string>* warnings = nullptr);

/// RMS of each feature's active values over the sample, divided by the
/// largest RMS. Never-active features get 0.
VectorF calibrate_scales(const SaeModel& sae, const RowMatrixF& sample);

/// Full spec for ablating or attenuating `targets`.
InterventionSpec make_spec(int layer, InterventionMode mode, int n_features, const std::set<int>& targets,
                           double alpha, const std::optional<VectorF>& scales = std::nullopt,
                           std::vector<std::string>* warnings = nullptr);

HiddenHook make_hook(const SaeModel& sae, const InterventionSpec& spec);

/// Features whose profile top token is `token`.
std::set<int> features_with_top_token(std::span<const FeatureProfile> profiles, int token);

// ---------------------------------------------------------------------------
// Noise floor
// ---------------------------------------------------------------------------

struct NoiseFloor {
  InterventionMode mode = InterventionMode::delta;
  std::int64_t positions = 0;
  double max_abs_logit_dev = 0.0;
  double mean_abs_logit_dev = 0.0;
  double max_odds_ratio_dev = 0.0;   // |OR - 1| over tokens and positions
  double mean_odds_ratio_dev = 0.0;
  bool bit_identical = true;         // every logit row identical bit for bit
};

/// Decodes each sequence token by token with and without an all-ones-mask
/// hook of the given mode and compares next-token logits per position.
NoiseFloor noise_floor(const ModelWeights& weights, std::span<const std::vector<int>> sequences,
                       const SaeModel& sae, int layer, InterventionMode mode);

/// reconstruct / delta deviation; infinity when delta is exact.
double noise_floor_ratio(const NoiseFloor& reconstruct, const NoiseFloor& delta);

// ---------------------------------------------------------------------------
// Difference in differences
// ---------------------------------------------------------------------------

struct DiDConfig {
  int n_patients = 200;
  int n_samples = 200;          // continuations per patient and arm
  int n_steps = 8;              // generated tokens per continuation
  int prefix_tokens = 16;       // prefix window taken from each patient
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const;
};

struct DiDArms {
  double treated_pre = 0.0;
  double treated_post = 0.0;
  double control_pre = 0.0;
  double control_post = 0.0;

  double did() const { return (treated_post - treated_pre) - (control_post - control_pre); }
};

struct DiDResult {
  double did_unperturbed = 0.0;
  double did_perturbed = 0.0;
  double delta_did = 0.0;
  DiDArms unperturbed;
  DiDArms perturbed;
  int n_patients = 0;
  int n_samples_per_arm = 0;
};

/// Outcome frequency per arm. Every (patient, sample) pair draws from the
/// same seed in both arms and across hooks.
DiDArms did_arms(const ModelWeights& weights, const Cohort& cohort, const PlantedAssociation& association,
                 const std::optional<HiddenHook>& hook, const DiDConfig& config);

/// spec = nullopt runs the unperturbed model in both halves.
DiDResult did_experiment(const ModelWeights& weights, const Cohort& cohort, const PlantedAssociation& association,
                         const SaeModel* sae, const std::optional<InterventionSpec>& spec, const DiDConfig& config);

struct ControlEnsemble {
  double targeted_delta = 0.0;
  std::vector<std::set<int>> sets;
  std::vector<double> control_deltas;
  double random_mean = 0.0;
  double random_min = 0.0;
  double random_max = 0.0;
  double ratio = 0.0;  // |targeted| / |random mean|
  bool outside_range = false;
  DiDResult targeted;
};

/// Size-matched random feature sets disjoint from the target, drawn by seed.
std::vector<std::set<int>> random_control_sets(int n_features, const std::set<int>& target, int n_sets,
                                               std::uint64_t seed);

/// Runs the targeted spec and n_control_sets random sets sharing the same
/// mode, layer, alpha and scales. The unperturbed arms are computed once.
ControlEnsemble control_comparison(const ModelWeights& weights, const Cohort& cohort,
                                   const PlantedAssociation& association, const SaeModel& sae,
                                   const InterventionSpec& target, int n_control_sets, const DiDConfig& config);

struct InterventionRow {
  std::string experiment;
  InterventionMode mode = InterventionMode::delta;
  ControlEnsemble ensemble;
};

void write_intervention_csv(const std::filesystem::path& path, std::span<const InterventionRow> rows);

/// JSON manifest with spec, configuration, seeds and estimand definition.
std::string intervention_manifest_json(const InterventionSpec& spec, const DiDConfig& config,
                                       const PlantedAssociation& association, const Vocabulary& vocab,
                                       const ControlEnsemble& result);

}  // namespace saelab
