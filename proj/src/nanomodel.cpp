#include "saelab/nanomodel.hpp"

#include "saelab/binio.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace saelab {
namespace {

constexpr float kLayerNormEps = 1e-5f;
constexpr binio::Magic kModelMagic = {'S', 'A', 'E', 'M', 'D', 'L', '0', '1'};
constexpr binio::Magic kActivationMagic = {'S', 'A', 'E', 'A', 'C', 'T', '0', '1'};
constexpr std::uint32_t kModelVersion = 1;

void layer_norm_rows(Eigen::Ref<RowMatrixF> x, const VectorF& gain, const VectorF& bias) {
  const auto d = static_cast<float>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const float mean = row.sum() / d;
    row.array() -= mean;
    const float var = row.squaredNorm() / d;
    row *= 1.0f / std::sqrt(var + kLayerNormEps);
    row.array() = row.array() * gain.transpose().array() + bias.transpose().array();
  }
}

void gelu_inplace(Eigen::Ref<RowMatrixF> x) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  x = x.unaryExpr([](float v) { return 0.5f * v * (1.0f + std::tanh(c * (v + 0.044715f * v * v * v))); });
}

RowMatrixF gaussian(int rows, int cols, double sd, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, static_cast<float>(sd));
  RowMatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void maybe_hook(const std::optional<HiddenHook>& hook, int layer, Eigen::Ref<RowMatrixF> states) {
  if (hook && hook->layer == layer && hook->apply) hook->apply(states);
}

// Multi-head causal attention over `x` (all positions at once).
RowMatrixF attention_full(const BlockWeights& b, const ModelConfig& cfg,
                          const std::vector<float>& slopes, const RowMatrixF& x) {
  const Eigen::Index t = x.rows();
  const int dh = cfg.head_dim();
  RowMatrixF q = (x * b.wq).rowwise() + b.bq.transpose();
  RowMatrixF k = (x * b.wk).rowwise() + b.bk.transpose();
  RowMatrixF v = (x * b.wv).rowwise() + b.bv.transpose();
  RowMatrixF out(t, cfg.width);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  RowMatrixF scores(t, t);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    scores.noalias() = (qh * kh.transpose()) * scale;
    for (Eigen::Index i = 0; i < t; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        scores(i, j) -= slopes[static_cast<std::size_t>(h)] * static_cast<float>(i - j);
        mx = std::max(mx, scores(i, j));
      }
      float total = 0.0f;
      for (Eigen::Index j = 0; j <= i; ++j) {
        scores(i, j) = std::exp(scores(i, j) - mx);
        total += scores(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= total;
      for (Eigen::Index j = i + 1; j < t; ++j) scores(i, j) = 0.0f;
    }
    out.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
  }
  RowMatrixF proj = (out * b.wo).rowwise() + b.bo.transpose();
  return proj;
}

void block_forward(const BlockWeights& b, const ModelConfig& cfg, const std::vector<float>& slopes,
                   RowMatrixF& x) {
  x += attention_full(b, cfg, slopes, x);
  layer_norm_rows(x, b.ln1_gain, b.ln1_bias);
  RowMatrixF hidden = (x * b.w_up).rowwise() + b.b_up.transpose();
  gelu_inplace(hidden);
  x.noalias() += hidden * b.w_down;
  x.rowwise() += b.b_down.transpose();
  layer_norm_rows(x, b.ln2_gain, b.ln2_bias);
}

RowMatrixF head_logits(const ModelWeights& w, const RowMatrixF& final_states) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(w.config.width));
  RowMatrixF logits = (final_states * w.embedding.transpose()) * scale;
  return logits;
}

std::string config_text(const ModelConfig& c) {
  return fmt::format("width={}\nn_layers={}\nn_heads={}\nffn_mult={}\nvocab_size={}\nseed={}\ninit_scale={}\n",
                     c.width, c.n_layers, c.n_heads, c.ffn_mult, c.vocab_size, c.seed, c.init_scale);
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

void ModelConfig::validate() const {
  if (width <= 0 || n_heads <= 0 || width % n_heads != 0) {
    throw ConfigError("width must be a positive multiple of n_heads");
  }
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (ffn_mult < 1) throw ConfigError("ffn_mult must be at least 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be nonnegative");
}

std::vector<float> alibi_slopes(int n_heads) {
  if (n_heads < 1) throw ConfigError("n_heads must be positive");
  auto power_of_two_slopes = [](int n) {
    std::vector<float> s;
    const double start = std::pow(2.0, -8.0 / n);
    for (int i = 0; i < n; ++i) s.push_back(static_cast<float>(std::pow(start, i + 1)));
    return s;
  };
  int closest = 1;
  while (closest * 2 <= n_heads) closest *= 2;
  auto slopes = power_of_two_slopes(closest);
  if (closest != n_heads) {
    const auto extra = power_of_two_slopes(2 * closest);
    for (int i = 0; static_cast<int>(slopes.size()) < n_heads; i += 2) {
      slopes.push_back(extra[static_cast<std::size_t>(i)]);
    }
  }
  return slopes;
}

ModelWeights init_toy_model(const ModelConfig& config) {
  config.validate();
  ModelWeights w;
  w.config = config;
  Rng rng(derive_seed(config.seed, 0x6d6f64656c));
  const int d = config.width;
  const int hidden = d * config.ffn_mult;
  w.embedding = gaussian(config.vocab_size, d, 1.0, rng);
  const double sd_in = config.init_scale / std::sqrt(static_cast<double>(d));
  const double sd_hidden = config.init_scale / std::sqrt(static_cast<double>(hidden));
  for (int l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.wq = gaussian(d, d, sd_in, rng);
    b.wk = gaussian(d, d, sd_in, rng);
    b.wv = gaussian(d, d, sd_in, rng);
    b.wo = gaussian(d, d, sd_in, rng);
    b.bq = b.bk = b.bv = b.bo = VectorF::Zero(d);
    b.ln1_gain = b.ln2_gain = VectorF::Ones(d);
    b.ln1_bias = b.ln2_bias = VectorF::Zero(d);
    b.w_up = gaussian(d, hidden, sd_in, rng);
    b.b_up = VectorF::Zero(hidden);
    b.w_down = gaussian(hidden, d, sd_hidden, rng);
    b.b_down = VectorF::Zero(d);
    w.blocks.push_back(std::move(b));
  }
  w.lnf_gain = VectorF::Ones(d);
  w.lnf_bias = VectorF::Zero(d);
  w.alibi_slopes = alibi_slopes(config.n_heads);
  return w;
}

void plant_embedding_association(ModelWeights& weights, int treatment_token, int outcome_token,
                                 double strength) {
  const int v = weights.config.vocab_size;
  if (treatment_token < 0 || treatment_token >= v || outcome_token < 0 || outcome_token >= v) {
    throw ConfigError("association tokens out of vocabulary range");
  }
  if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("strength must lie in [0, 1]");
  Eigen::RowVectorXf t = weights.embedding.row(treatment_token);
  const Eigen::RowVectorXf o = weights.embedding.row(outcome_token);
  const float norm = t.norm();
  const auto s = static_cast<float>(strength);
  Eigen::RowVectorXf mixed = (1.0f - s) * t.normalized() + s * o.normalized();
  weights.embedding.row(treatment_token) = mixed.normalized() * norm;
}

void ActivationBatch::validate() const {
  const auto n = static_cast<std::size_t>(states.rows());
  if (token_ids.size() != n || patient_ids.size() != n || positions.size() != n) {
    throw FormatError("activation batch index vectors disagree with row count");
  }
  if (!states.allFinite()) throw NumericalError("activation batch contains non-finite values");
}

ForwardResult forward_collect(const ModelWeights& weights, std::span<const int> tokens,
                              const std::set<int>& layers, const std::optional<HiddenHook>& hook,
                              std::uint32_t patient_id) {
  const auto& cfg = weights.config;
  if (tokens.empty()) throw ConfigError("forward pass needs a nonempty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(cfg.vocab_size));
    }
  }
  for (int l : layers) {
    if (l < 0 || l > cfg.n_layers + 1) {
      throw ConfigError("extraction layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(cfg.n_layers + 1) + "]");
    }
  }
  const auto t = static_cast<Eigen::Index>(tokens.size());
  ForwardResult result;
  auto collect = [&](int layer, const RowMatrixF& x) {
    if (!layers.count(layer)) return;
    ActivationBatch b;
    b.layer = layer;
    b.states = x;
    for (Eigen::Index i = 0; i < t; ++i) {
      b.token_ids.push_back(static_cast<std::uint32_t>(tokens[static_cast<std::size_t>(i)]));
      b.patient_ids.push_back(patient_id);
      b.positions.push_back(static_cast<std::uint32_t>(i));
    }
    result.batches.push_back(std::move(b));
  };

  RowMatrixF x(t, cfg.width);
  for (Eigen::Index i = 0; i < t; ++i) x.row(i) = weights.embedding.row(tokens[static_cast<std::size_t>(i)]);
  maybe_hook(hook, 0, x);
  collect(0, x);
  for (int l = 0; l < cfg.n_layers; ++l) {
    block_forward(weights.blocks[static_cast<std::size_t>(l)], cfg, weights.alibi_slopes, x);
    maybe_hook(hook, l + 1, x);
    collect(l + 1, x);
  }
  layer_norm_rows(x, weights.lnf_gain, weights.lnf_bias);
  maybe_hook(hook, cfg.n_layers + 1, x);
  collect(cfg.n_layers + 1, x);
  result.logits = head_logits(weights, x);
  return result;
}

DecodeState::DecodeState(const ModelWeights& weights, std::optional<HiddenHook> hook)
    : weights_(&weights), hook_(std::move(hook)) {
  keys_.resize(weights.blocks.size());
  values_.resize(weights.blocks.size());
}

Eigen::RowVectorXf DecodeState::push(int token) {
  const auto& w = *weights_;
  const auto& cfg = w.config;
  if (token < 0 || token >= cfg.vocab_size) {
    throw ConfigError("token id " + std::to_string(token) + " outside vocabulary");
  }
  const int dh = cfg.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const int pos = length_;
  RowMatrixF x = w.embedding.row(token);
  maybe_hook(hook_, 0, x);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    auto& kc = keys_[l];
    auto& vc = values_[l];
    kc.conservativeResize(pos + 1, cfg.width);
    vc.conservativeResize(pos + 1, cfg.width);
    RowMatrixF q = x * b.wq + b.bq.transpose();
    kc.row(pos) = x * b.wk + b.bk.transpose();
    vc.row(pos) = x * b.wv + b.bv.transpose();
    RowMatrixF attn(1, cfg.width);
    Eigen::RowVectorXf scores(pos + 1);
    for (int h = 0; h < cfg.n_heads; ++h) {
      scores.noalias() = (q.middleCols(h * dh, dh) * kc.middleCols(h * dh, dh).transpose()) * scale;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j <= pos; ++j) {
        scores[j] -= w.alibi_slopes[static_cast<std::size_t>(h)] * static_cast<float>(pos - j);
        mx = std::max(mx, scores[j]);
      }
      float total = 0.0f;
      for (int j = 0; j <= pos; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        total += scores[j];
      }
      scores /= total;
      attn.middleCols(h * dh, dh).noalias() = scores * vc.middleCols(h * dh, dh);
    }
    x += attn * b.wo + b.bo.transpose();
    layer_norm_rows(x, b.ln1_gain, b.ln1_bias);
    RowMatrixF hidden = x * b.w_up + b.b_up.transpose();
    gelu_inplace(hidden);
    x.noalias() += hidden * b.w_down;
    x += b.b_down.transpose();
    layer_norm_rows(x, b.ln2_gain, b.ln2_bias);
    maybe_hook(hook_, static_cast<int>(l) + 1, x);
  }
  layer_norm_rows(x, w.lnf_gain, w.lnf_bias);
  maybe_hook(hook_, cfg.n_layers + 1, x);
  ++length_;
  return head_logits(w, x).row(0);
}

Eigen::RowVectorXd softmax(const Eigen::RowVectorXf& logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  Eigen::RowVectorXd z = logits.cast<double>() / temperature;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

namespace {

int choose_token(const Eigen::RowVectorXf& logits, const GenerationOptions& opt, Rng& rng) {
  const double u = uniform01(rng);
  if (opt.greedy) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  const auto p = softmax(logits, opt.temperature);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace

std::vector<int> continue_from(DecodeState state, Eigen::RowVectorXf next_logits,
                               const GenerationOptions& options) {
  if (options.n_steps < 1) throw ConfigError("n_steps must be at least 1");
  if (!options.greedy && !(options.temperature > 0.0)) throw ConfigError("temperature must be positive");
  Rng rng(derive_seed(options.seed, 0x67656e));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(options.n_steps));
  for (int step = 0; step < options.n_steps; ++step) {
    const int tok = choose_token(next_logits, options, rng);
    out.push_back(tok);
    if (step + 1 < options.n_steps) next_logits = state.push(tok);
  }
  return out;
}

std::vector<int> generate_continuation(const ModelWeights& weights, std::span<const int> prefix,
                                       const GenerationOptions& options,
                                       const std::optional<HiddenHook>& hook) {
  if (prefix.empty()) throw ConfigError("generation needs a nonempty prefix");
  if (options.n_steps < 1) throw ConfigError("n_steps must be at least 1");
  if (!options.greedy && !(options.temperature > 0.0)) throw ConfigError("temperature must be positive");
  DecodeState state(weights, hook);
  Eigen::RowVectorXf logits;
  for (int tok : prefix) logits = state.push(tok);
  return continue_from(std::move(state), std::move(logits), options);
}

// ---------------------------------------------------------------------------
// Activation files
// ---------------------------------------------------------------------------

ActivationWriter::ActivationWriter(const std::filesystem::path& path, int width, int layer)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc), width_(width), layer_(layer) {
  if (!out_) throw Error("cannot open '" + path.string() + "' for writing");
  if (width <= 0) throw ConfigError("activation width must be positive");
  out_.write(kActivationMagic.data(), kActivationMagic.size());
  binio::put_u32(out_, kActivationVersion);
  binio::put_u32(out_, static_cast<std::uint32_t>(width));
  binio::put_i32(out_, layer);
  binio::put_u32(out_, 0);
}

void ActivationWriter::write(const ActivationBatch& batch) {
  batch.validate();
  if (batch.states.cols() != width_) {
    throw ConfigError("activation batch width " + std::to_string(batch.states.cols()) +
                      " does not match file width " + std::to_string(width_));
  }
  if (batch.layer != layer_) throw ConfigError("activation batch layer does not match file layer");
  binio::put_u32(out_, static_cast<std::uint32_t>(batch.rows()));
  binio::put_f32s(out_, std::span<const float>(batch.states.data(), static_cast<std::size_t>(batch.states.size())));
  binio::put_u32s(out_, batch.token_ids);
  binio::put_u32s(out_, batch.patient_ids);
  binio::put_u32s(out_, batch.positions);
  ++count_;
}

void ActivationWriter::close() {
  out_.flush();
  if (!out_) throw Error("write failed for '" + path_.string() + "'");
  out_.close();
}

ActivationReader::ActivationReader(const std::filesystem::path& path)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw MissingPrerequisite("activation file '" + path.string() + "' not found");
  binio::Reader r(in_);
  binio::Magic magic{};
  r.bytes(magic);
  if (magic != kActivationMagic) throw FormatError("bad activation magic in '" + path.string() + "'");
  const auto version = r.u32();
  if (version != kActivationVersion) {
    throw FormatError("activation file version " + std::to_string(version) + " unsupported");
  }
  width_ = static_cast<int>(r.u32());
  layer_ = r.i32();
  r.u32();
  if (width_ <= 0) throw FormatError("activation header declares zero width");
  offset_ = r.offset();
}

std::optional<ActivationBatch> ActivationReader::next() {
  binio::Reader r(in_);
  if (r.at_eof()) return std::nullopt;
  try {
    ActivationBatch b;
    b.layer = layer_;
    const auto n = r.u32();
    b.states.resize(n, width_);
    r.f32s(std::span<float>(b.states.data(), static_cast<std::size_t>(b.states.size())));
    b.token_ids.resize(n);
    b.patient_ids.resize(n);
    b.positions.resize(n);
    r.u32s(b.token_ids);
    r.u32s(b.patient_ids);
    r.u32s(b.positions);
    offset_ += r.offset();
    return b;
  } catch (const FormatError&) {
    throw FormatError("truncated activation file '" + path_.string() + "' at byte offset " +
                      std::to_string(offset_ + r.offset()));
  }
}

std::vector<ActivationBatch> read_all_activations(const std::filesystem::path& path) {
  ActivationReader reader(path);
  std::vector<ActivationBatch> out;
  while (auto b = reader.next()) out.push_back(std::move(*b));
  return out;
}

// ---------------------------------------------------------------------------
// Weight checkpoints
// ---------------------------------------------------------------------------

void save_model(const std::filesystem::path& path, const ModelWeights& w) {
  binio::TensorArchive a;
  a.texts["config"] = config_text(w.config);
  a.put("embedding", w.embedding);
  a.put("lnf.gain", w.lnf_gain);
  a.put("lnf.bias", w.lnf_bias);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const auto p = fmt::format("block{}.", l);
    a.put(p + "wq", b.wq);
    a.put(p + "wk", b.wk);
    a.put(p + "wv", b.wv);
    a.put(p + "wo", b.wo);
    a.put(p + "bq", b.bq);
    a.put(p + "bk", b.bk);
    a.put(p + "bv", b.bv);
    a.put(p + "bo", b.bo);
    a.put(p + "ln1.gain", b.ln1_gain);
    a.put(p + "ln1.bias", b.ln1_bias);
    a.put(p + "w_up", b.w_up);
    a.put(p + "b_up", b.b_up);
    a.put(p + "w_down", b.w_down);
    a.put(p + "b_down", b.b_down);
    a.put(p + "ln2.gain", b.ln2_gain);
    a.put(p + "ln2.bias", b.ln2_bias);
  }
  binio::write_archive(path, kModelMagic, kModelVersion, a);
}

ModelWeights load_model(const std::filesystem::path& path) {
  const auto a = binio::read_archive(path, kModelMagic, kModelVersion);
  const auto kv = parse_kv(a.text("config"));
  auto get = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("model config lacks '" + key + "'");
    return it->second;
  };
  ModelWeights w;
  w.config.width = std::stoi(get("width"));
  w.config.n_layers = std::stoi(get("n_layers"));
  w.config.n_heads = std::stoi(get("n_heads"));
  w.config.ffn_mult = std::stoi(get("ffn_mult"));
  w.config.vocab_size = std::stoi(get("vocab_size"));
  w.config.seed = std::stoull(get("seed"));
  w.config.init_scale = std::stod(get("init_scale"));
  w.config.validate();
  w.embedding = a.matrix("embedding");
  w.lnf_gain = a.vector("lnf.gain");
  w.lnf_bias = a.vector("lnf.bias");
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto p = fmt::format("block{}.", l);
    BlockWeights b;
    b.wq = a.matrix(p + "wq");
    b.wk = a.matrix(p + "wk");
    b.wv = a.matrix(p + "wv");
    b.wo = a.matrix(p + "wo");
    b.bq = a.vector(p + "bq");
    b.bk = a.vector(p + "bk");
    b.bv = a.vector(p + "bv");
    b.bo = a.vector(p + "bo");
    b.ln1_gain = a.vector(p + "ln1.gain");
    b.ln1_bias = a.vector(p + "ln1.bias");
    b.w_up = a.matrix(p + "w_up");
    b.b_up = a.vector(p + "b_up");
    b.w_down = a.matrix(p + "w_down");
    b.b_down = a.vector(p + "b_down");
    b.ln2_gain = a.vector(p + "ln2.gain");
    b.ln2_bias = a.vector(p + "ln2.bias");
    w.blocks.push_back(std::move(b));
  }
  if (w.embedding.rows() != w.config.vocab_size || w.embedding.cols() != w.config.width) {
    throw FormatError("embedding shape disagrees with model config");
  }
  w.alibi_slopes = alibi_slopes(w.config.n_heads);
  return w;
}

}  // namespace saelab
