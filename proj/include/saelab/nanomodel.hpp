#pragma once

#include "saelab/common.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace saelab {

struct ModelConfig {
  int width = 32;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_mult = 4;
  int vocab_size = 0;
  std::uint64_t seed = 0;
  /// Multiplier on the 1/sqrt(fan_in) standard deviation of block weights.
  double init_scale = 0.5;

  int extraction_points() const { return n_layers + 2; }
  int head_dim() const { return width / n_heads; }
  void validate() const;
};

struct BlockWeights {
  RowMatrixF wq, wk, wv, wo;  // width x width, applied as x * W
  VectorF bq, bk, bv, bo;
  VectorF ln1_gain, ln1_bias;
  RowMatrixF w_up;    // width x hidden
  VectorF b_up;
  RowMatrixF w_down;  // hidden x width
  VectorF b_down;
  VectorF ln2_gain, ln2_bias;
};

/// Post-norm decoder-only transformer with ALiBi attention and a tied
/// output head: logits = final_state * embedding^T / sqrt(width).
struct ModelWeights {
  ModelConfig config;
  RowMatrixF embedding;  // vocab x width
  std::vector<BlockWeights> blocks;
  VectorF lnf_gain, lnf_bias;
  std::vector<float> alibi_slopes;
};

/// Geometric ALiBi slopes; for non-powers of two the standard interleaving
/// of the next power's slopes fills the remainder.
std::vector<float> alibi_slopes(int n_heads);

ModelWeights init_toy_model(const ModelConfig& config);

/// Rotates the treatment token's embedding toward the outcome token's
/// embedding: e_t <- normalize((1-s) e_t + s e_o) * |e_t|. This wires a
/// planted treatment -> outcome preference into an untrained model.
void plant_embedding_association(ModelWeights& weights, int treatment_token, int outcome_token,
                                 double strength);

struct ActivationBatch {
  int layer = 0;
  RowMatrixF states;  // n_positions x width
  std::vector<std::uint32_t> token_ids;
  std::vector<std::uint32_t> patient_ids;
  std::vector<std::uint32_t> positions;

  Eigen::Index rows() const { return states.rows(); }
  void validate() const;
};

/// Row-wise transform applied to the hidden states of one extraction point
/// before the remaining blocks consume them.
struct HiddenHook {
  int layer = 0;
  std::function<void(Eigen::Ref<RowMatrixF> states)> apply;
};

struct ForwardResult {
  RowMatrixF logits;  // n_positions x vocab
  std::vector<ActivationBatch> batches;  // ascending layer order
};

ForwardResult forward_collect(const ModelWeights& weights, std::span<const int> tokens,
                              const std::set<int>& layers,
                              const std::optional<HiddenHook>& hook = std::nullopt,
                              std::uint32_t patient_id = 0);

/// Incremental decoder with per-block key/value caches. Produces the same
/// logits as forward_collect up to float rounding.
class DecodeState {
 public:
  DecodeState(const ModelWeights& weights, std::optional<HiddenHook> hook);
  /// Feeds one token; returns the logits row predicting the next token.
  Eigen::RowVectorXf push(int token);
  int length() const { return length_; }

 private:
  const ModelWeights* weights_;
  std::optional<HiddenHook> hook_;
  std::vector<RowMatrixF> keys_, values_;
  int length_ = 0;
};

struct GenerationOptions {
  int n_steps = 1;
  double temperature = 1.0;
  bool greedy = false;  // argmax, the temperature -> 0 limit
  std::uint64_t seed = 0;
};

/// Temperature-scaled softmax of one logits row.
Eigen::RowVectorXd softmax(const Eigen::RowVectorXf& logits, double temperature = 1.0);

/// Samples n_steps tokens after the prefix. One uniform draw per step, so
/// runs sharing a seed share random numbers step for step.
std::vector<int> generate_continuation(const ModelWeights& weights, std::span<const int> prefix,
                                       const GenerationOptions& options,
                                       const std::optional<HiddenHook>& hook = std::nullopt);

/// Same as generate_continuation, but starts from a prefilled decode state
/// (copied), avoiding repeated prefix evaluation across samples.
std::vector<int> continue_from(DecodeState state, Eigen::RowVectorXf next_logits,
                               const GenerationOptions& options);

// ---------------------------------------------------------------------------
// Activation files
// ---------------------------------------------------------------------------

/// Header: 8-byte magic "SAEACT01", u32 version, u32 width, i32 layer,
/// u32 reserved (0). Each batch block: u32 n_rows, n_rows*width f32 states
/// (row-major), then n_rows u32 token ids, patient ids, positions.
inline constexpr std::uint32_t kActivationVersion = 1;

class ActivationWriter {
 public:
  ActivationWriter(const std::filesystem::path& path, int width, int layer);
  void write(const ActivationBatch& batch);
  void close();
  std::uint64_t batches_written() const { return count_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  int width_;
  int layer_;
  std::uint64_t count_ = 0;
};

class ActivationReader {
 public:
  /// Validates the header; throws FormatError before yielding anything.
  explicit ActivationReader(const std::filesystem::path& path);
  std::optional<ActivationBatch> next();
  int width() const { return width_; }
  int layer() const { return layer_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
  int width_ = 0;
  int layer_ = 0;
};

std::vector<ActivationBatch> read_all_activations(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Weight checkpoints
// ---------------------------------------------------------------------------

void save_model(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_model(const std::filesystem::path& path);

}  // namespace saelab
