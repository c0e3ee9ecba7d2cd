#pragma once

#include "saelab/common.hpp"
#include "saelab/nanomodel.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace saelab {

struct SaeConfig {
  int width = 32;
  int expansion = 8;
  int k = 16;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 10000;
  int batch_patients = 16;
  int dead_window = 1000;
  int resample_check_every = 500;
  std::uint64_t seed = 0;

  int features() const { return width * expansion; }
  void validate() const;
};

/// TopK sparse autoencoder. Encoder rows and decoder columns index features.
struct SaeModel {
  SaeConfig config;
  RowMatrixF w_enc;  // F x d
  VectorF b_enc;     // F
  MatrixF w_dec;     // d x F, unit-norm columns
  VectorF b_dec;     // d

  int width() const { return static_cast<int>(w_dec.rows()); }
  int features() const { return static_cast<int>(w_dec.cols()); }
  int k() const { return config.k; }
  /// max over columns of | ||col|| - 1 |.
  double decoder_norm_error() const;
};

/// K (index, value) entries per row; indices strictly increasing within a
/// row, values clamped at zero.
struct SparseCode {
  int n_features = 0;
  int k = 0;
  std::vector<int> indices;  // rows * k
  std::vector<float> values;  // rows * k

  Eigen::Index rows() const { return k == 0 ? 0 : static_cast<Eigen::Index>(indices.size()) / k; }
  std::span<const int> row_indices(Eigen::Index r) const {
    return {indices.data() + r * k, static_cast<std::size_t>(k)};
  }
  std::span<const float> row_values(Eigen::Index r) const {
    return {values.data() + r * k, static_cast<std::size_t>(k)};
  }
  RowMatrixF to_dense() const;
};

SaeModel init_sae(const SaeConfig& config);

/// Selects the K largest pre-activations per row (lower index wins ties)
/// and clamps the survivors at zero.
SparseCode encode(const SaeModel& sae, const RowMatrixF& h);
SparseCode encode(const SaeModel& sae, const Eigen::RowVectorXf& h);
/// Top-K selection on precomputed pre-activations (rows x F).
SparseCode topk_select(const RowMatrixF& pre, int k);

RowMatrixF decode(const SaeModel& sae, const SparseCode& z);
RowMatrixF reconstruct(const SaeModel& sae, const RowMatrixF& h);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Parameter set in a chosen scalar type. Training runs in float; the
/// gradient check instantiates the same code in double.
template <class S>
struct SaeParams {
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w_enc;
  Eigen::Matrix<S, Eigen::Dynamic, 1> b_enc;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> w_dec;
  Eigen::Matrix<S, Eigen::Dynamic, 1> b_dec;

  static SaeParams zeros_like(const SaeParams& p);
};

SaeParams<float> params_of(const SaeModel& sae);
SaeParams<double> params_of_double(const SaeModel& sae);

/// Mean over rows of ||h - h_hat||^2 with a fixed support per row: on the
/// support z_j = max(w_enc_j . h + b_enc_j, 0), zero elsewhere.
template <class S>
double masked_loss(const SaeParams<S>& p, const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& h,
                   const SparseCode& support);

/// Same loss, plus its gradient with the support held fixed.
template <class S>
double masked_loss_and_grad(const SaeParams<S>& p,
                            const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& h,
                            const SparseCode& support, SaeParams<S>& grad);

struct TrainState {
  SaeParams<float> m;  // Adam first moments
  SaeParams<float> v;  // Adam second moments
  std::int64_t step = 0;
  std::vector<std::int64_t> last_active;  // per feature
  double running_loss = 0.0;
};

TrainState init_train_state(const SaeModel& sae);

/// One Adam step on the batch; returns the pre-update loss.
double train_step(SaeModel& sae, TrainState& state, const RowMatrixF& batch);

/// Resamples features idle for at least dead_window steps toward the
/// residuals of the batch's highest-loss rows. Returns the count.
int resample_dead(SaeModel& sae, TrainState& state, const RowMatrixF& batch);

int dead_feature_count(const SaeModel& sae, const TrainState& state);

/// Source of training batches; nullopt when exhausted.
class ActivationStream {
 public:
  virtual ~ActivationStream() = default;
  virtual std::optional<RowMatrixF> next_batch() = 0;
};

/// Cycles through rows of a matrix in reshuffled epochs.
class MatrixRowStream : public ActivationStream {
 public:
  MatrixRowStream(RowMatrixF rows, int rows_per_batch, std::uint64_t seed,
                  std::optional<int> max_batches = std::nullopt);
  std::optional<RowMatrixF> next_batch() override;

 private:
  RowMatrixF rows_;
  int rows_per_batch_;
  Rng rng_;
  std::vector<Eigen::Index> order_;
  std::size_t cursor_ = 0;
  std::optional<int> remaining_;
};

/// Cycles through patients in reshuffled epochs; each batch stacks the
/// positions of `patients_per_batch` patients.
class PatientStream : public ActivationStream {
 public:
  PatientStream(std::vector<RowMatrixF> per_patient, int patients_per_batch, std::uint64_t seed);
  std::optional<RowMatrixF> next_batch() override;

 private:
  std::vector<RowMatrixF> patients_;
  int per_batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct TrainLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  int dead_count = 0;
  int resampled = 0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::optional<std::int64_t> exhausted_at_step;
  std::vector<std::string> warnings;
};

struct TrainResult {
  SaeModel model;
  TrainLog log;
};

inline constexpr int kLogEvery = 100;

TrainResult train_sae(ActivationStream& stream, const SaeConfig& config);

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kSaeCheckpointVersion = 1;

void save_sae(const std::filesystem::path& path, const SaeModel& sae);
SaeModel load_sae(const std::filesystem::path& path, std::optional<int> expected_width = std::nullopt);

}  // namespace saelab
