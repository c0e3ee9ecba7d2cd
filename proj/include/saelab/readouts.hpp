#pragma once

#include "saelab/common.hpp"
#include "saelab/datagen.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace saelab {

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

enum class WindowKind { hours, days, full, obs_outcome };

struct WindowSpec {
  WindowKind kind = WindowKind::full;
  double observation_limit = 0.0;  // hours; ignored for full
  std::optional<double> outcome_horizon;  // hours after window end (obs_outcome)

  static WindowSpec full();
  static WindowSpec hours(double h);
  static WindowSpec days(double d);
  static WindowSpec obs_outcome(double obs_hours, double outcome_hours);
  /// Parses "full", "48h", "365d" or "1y/3y".
  static WindowSpec parse(const std::string& text);

  std::string label() const;
  void validate() const;
};

/// Keeps the prefix of tokens whose cumulative time delta is within the
/// observation limit. Outcome fields stay; for obs_outcome windows `died`
/// becomes death within outcome_horizon of the window end.
PatientRecord truncate_to_window(const PatientRecord& patient, const WindowSpec& window);

// ---------------------------------------------------------------------------
// Patient matrices
// ---------------------------------------------------------------------------

enum class Representation { sae, dense, bot, presence, seqlen };

std::string to_string(Representation r);
Representation parse_representation(const std::string& text);

struct PatientFeatureMatrix {
  Representation tag = Representation::dense;
  RowMatrixD rows;                   // one row per patient
  std::vector<int> died;
  std::vector<double> los_hours;
  std::vector<double> time_to_event;
  std::vector<int> patient_ids;      // index into the source cohort
  int n_excluded = 0;                // patients dropped for empty sequences

  Eigen::Index n() const { return rows.rows(); }
  void validate() const;
  /// Row subset in the given order.
  PatientFeatureMatrix subset(std::span<const int> rows_to_keep) const;
};

/// Mean over positions of hidden states.
Eigen::RowVectorXd pool_dense(const RowMatrixF& states);
/// Mean over positions of sparse codes (dense F-vector).
Eigen::RowVectorXd pool_codes(const SparseCode& code);

/// Per-patient hidden states at one extraction point, skipping patients with
/// no model-visible tokens. `kept` receives the cohort indices retained.
std::vector<RowMatrixF> patient_states(const ModelWeights& weights, std::span<const PatientRecord> patients,
                                       const Vocabulary& vocab, int layer, std::vector<int>& kept);

/// Model-based pooling (tag sae needs an SAE, tag dense ignores it).
PatientFeatureMatrix pool_patient(Representation tag, const ModelWeights& weights,
                                  std::span<const PatientRecord> patients, const Vocabulary& vocab, int layer,
                                  const SaeModel* sae = nullptr);

/// Assembles a matrix from precomputed per-patient states.
PatientFeatureMatrix pool_from_states(Representation tag, std::span<const RowMatrixF> states,
                                      std::span<const int> kept, std::span<const PatientRecord> patients,
                                      const SaeModel* sae = nullptr);

struct BaselineSet {
  PatientFeatureMatrix bot;
  PatientFeatureMatrix presence;
  PatientFeatureMatrix seqlen;
};

/// Model-free baselines over the non-special vocabulary ([DEATH] and [PAD]
/// never counted). Empty sequences give all-zero rows unless excluded.
BaselineSet baselines(std::span<const PatientRecord> patients, const Vocabulary& vocab,
                      bool exclude_empty = false);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC with midranks (ties count 1/2). Throws on one class.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

/// Harrell's C over comparable pairs (t_i < t_j with an event at t_i),
/// O(n log n). Score ties count 1/2. Throws when no pair is comparable.
double harrell_c(std::span<const double> scores, std::span<const double> times, std::span<const int> events);

double r_squared(std::span<const double> y, std::span<const double> y_hat);

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;  // 1 for constant columns

  static Standardizer fit(const RowMatrixD& x);
  RowMatrixD apply(const RowMatrixD& x) const;
};

/// L2 logistic regression in the C convention: minimizes
/// 0.5 |w|^2 + C * sum(log loss), intercept unpenalized. Newton with
/// backtracking.
struct LogisticModel {
  Eigen::VectorXd w;
  double b = 0.0;
  int iterations = 0;
  bool converged = false;

  Eigen::VectorXd decision(const RowMatrixD& x) const;
};

LogisticModel fit_logistic(const RowMatrixD& x, std::span<const int> y, double c, int max_iter = 100);

struct ProbeConfig {
  double test_fraction = 0.2;
  int folds = 5;
  std::vector<double> c_grid{0.001, 0.01, 0.1, 1.0, 10.0, 100.0};
  std::vector<double> ridge_grid{1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3};
  int bootstrap = 500;
  int min_test_events = 10;
};

struct ProbeResult {
  double auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double chosen_c = 0.0;
  int n_train = 0;
  int n_test = 0;
  int n_events = 0;  // events in the test split
  int bootstrap_n = 0;
  bool underpowered = false;
  std::vector<int> test_rows;        // row indices of the test split
  std::vector<double> test_scores;
};

/// Stratified split: returns (train rows, test rows), deterministic by seed.
std::pair<std::vector<int>, std::vector<int>> stratified_split(std::span<const int> labels, double test_fraction,
                                                               std::uint64_t seed);

/// Percentile bootstrap of a metric over resampled test indices. Resamples
/// where the metric is undefined are redrawn.
std::pair<double, double> bootstrap_ci(int n, int resamples, std::uint64_t seed,
                                       const std::function<std::optional<double>(std::span<const int>)>& metric,
                                       int* used = nullptr);

ProbeResult logistic_probe(const PatientFeatureMatrix& x, std::span<const int> labels, std::uint64_t split_seed,
                           const ProbeConfig& config = {});
ProbeResult logistic_probe(const PatientFeatureMatrix& x, std::uint64_t split_seed, const ProbeConfig& config = {});

struct RidgeResult {
  double r2 = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double chosen_lambda = 0.0;
  int n_train = 0;
  int n_test = 0;
  int bootstrap_n = 0;
};

/// Ridge regression on standardized features with an unpenalized intercept.
RidgeResult ridge_probe(const RowMatrixD& x, std::span<const double> y, std::uint64_t split_seed,
                        const ProbeConfig& config = {});
/// LoS regression on log(los_hours).
RidgeResult ridge_probe(const PatientFeatureMatrix& x, std::uint64_t split_seed, const ProbeConfig& config = {});

struct GroupProbeRow {
  std::string group;
  double auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_test = 0;
  int n_events = 0;
  bool underpowered = false;
  std::string note;  // nonempty when skipped
};

/// One global model; AUC per group on that group's test patients.
std::vector<GroupProbeRow> group_stratified_probe(const PatientFeatureMatrix& x, std::span<const std::string> groups,
                                                  std::uint64_t split_seed, const ProbeConfig& config = {});

// ---------------------------------------------------------------------------
// Survival
// ---------------------------------------------------------------------------

struct CoxResult {
  int feature_id = 0;
  double beta = 0.0;
  double hazard_ratio = 1.0;
  double se = 0.0;
  double p_value = 1.0;
  bool significant_bonferroni = false;
  bool converged = false;
  int iterations = 0;
};

/// Univariate Cox fit (Breslow ties, Newton-Raphson, Wald p-value).
/// Throws on a zero-variance feature or when no event is present.
CoxResult cox_univariate(std::span<const double> x, std::span<const double> times, std::span<const int> events);

/// Per-column Cox fits sorted by p; significance at alpha_family / F.
/// Zero-variance columns are reported with p = 1 and converged = false.
std::vector<CoxResult> cox_screen(const RowMatrixD& x, std::span<const double> times, std::span<const int> events,
                                  double alpha_family = 0.05);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string representation;
  std::string window;
  std::string metric;
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_events = 0;
  bool underpowered = false;
};

void write_results_csv(const std::filesystem::path& path, std::span<const ResultRow> rows);
void write_cox_csv(const std::filesystem::path& path, std::span<const CoxResult> rows);

struct KSensitivityRow {
  std::string task;            // mortality or los
  std::string representation;  // sae or dense
  int k = 0;                   // 0 for the dense row
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Trains one SAE per K on the cohort's activations at `layer` (same data,
/// same seed) and probes mortality and LoS; appends one dense row per task.
std::vector<KSensitivityRow> k_sensitivity(const ModelWeights& weights, std::span<const PatientRecord> patients,
                                           const Vocabulary& vocab, int layer, std::span<const int> k_values,
                                           const SaeConfig& base, std::uint64_t split_seed,
                                           const ProbeConfig& config = {}, int jobs = 1);

void write_k_sensitivity_csv(const std::filesystem::path& path, std::span<const KSensitivityRow> rows);

}  // namespace saelab
