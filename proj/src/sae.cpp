#include "saelab/sae.hpp"

#include "saelab/binio.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace saelab {
namespace {

constexpr binio::Magic kSaeMagic = {'S', 'A', 'E', 'C', 'K', 'P', 'T', '1'};
constexpr double kResampleEncoderScale = 0.2;

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
double masked_impl(const SaeParams<S>& p, const RowMat<S>& h, const SparseCode& support,
                   SaeParams<S>* grad) {
  const Eigen::Index n = h.rows();
  if (n == 0) return 0.0;
  if (support.rows() != n) throw ConfigError("support rows disagree with batch rows");
  const int k = support.k;
  const S scale = S(2) / static_cast<S>(n);
  double total = 0.0;
  Eigen::Matrix<S, Eigen::Dynamic, 1> hhat(p.b_dec.size());
  Eigen::Matrix<S, Eigen::Dynamic, 1> pre(k), z(k);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto idx = support.row_indices(r);
    const auto hr = h.row(r).transpose();
    hhat = p.b_dec;
    for (int s = 0; s < k; ++s) {
      const int j = idx[static_cast<std::size_t>(s)];
      pre[s] = p.w_enc.row(j).dot(h.row(r)) + p.b_enc[j];
      z[s] = std::max(pre[s], S(0));
      if (z[s] != S(0)) hhat.noalias() += z[s] * p.w_dec.col(j);
    }
    const Eigen::Matrix<S, Eigen::Dynamic, 1> resid = hhat - hr;
    total += static_cast<double>(resid.squaredNorm());
    if (grad) {
      const Eigen::Matrix<S, Eigen::Dynamic, 1> g = scale * resid;
      grad->b_dec += g;
      for (int s = 0; s < k; ++s) {
        const int j = idx[static_cast<std::size_t>(s)];
        if (z[s] != S(0)) grad->w_dec.col(j).noalias() += z[s] * g;
        if (pre[s] > S(0)) {
          const S dz = p.w_dec.col(j).dot(g);
          grad->w_enc.row(j).noalias() += dz * h.row(r);
          grad->b_enc[j] += dz;
        }
      }
    }
  }
  return total / static_cast<double>(n);
}

template <class Derived, class GradDerived, class MomDerived>
void adam_update(Eigen::DenseBase<Derived>& param, const Eigen::DenseBase<GradDerived>& g,
                 Eigen::DenseBase<MomDerived>& m, Eigen::DenseBase<MomDerived>& v, float b1, float b2,
                 float lr_t, float eps) {
  m.derived().array() = b1 * m.derived().array() + (1.0f - b1) * g.derived().array();
  v.derived().array() = b2 * v.derived().array() + (1.0f - b2) * g.derived().array().square();
  param.derived().array() -= lr_t * m.derived().array() / (v.derived().array().sqrt() + eps);
}

void renormalize_columns(MatrixF& w) {
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    const float norm = w.col(j).norm();
    if (norm > 0.0f) w.col(j) /= norm;
  }
}

std::string config_text(const SaeConfig& c) {
  return fmt::format(
      "width={}\nexpansion={}\nk={}\nlr={}\nbeta1={}\nbeta2={}\nadam_eps={}\nsteps={}\n"
      "batch_patients={}\ndead_window={}\nresample_check_every={}\nseed={}\n",
      c.width, c.expansion, c.k, c.lr, c.beta1, c.beta2, c.adam_eps, c.steps, c.batch_patients,
      c.dead_window, c.resample_check_every, c.seed);
}

SaeConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("SAE checkpoint config lacks '") + key + "'");
    return it->second;
  };
  SaeConfig c;
  c.width = std::stoi(get("width"));
  c.expansion = std::stoi(get("expansion"));
  c.k = std::stoi(get("k"));
  c.lr = std::stod(get("lr"));
  c.beta1 = std::stod(get("beta1"));
  c.beta2 = std::stod(get("beta2"));
  c.adam_eps = std::stod(get("adam_eps"));
  c.steps = std::stoi(get("steps"));
  c.batch_patients = std::stoi(get("batch_patients"));
  c.dead_window = std::stoi(get("dead_window"));
  c.resample_check_every = std::stoi(get("resample_check_every"));
  c.seed = std::stoull(get("seed"));
  return c;
}

}  // namespace

void SaeConfig::validate() const {
  if (width < 1) throw ConfigError("SAE width must be positive");
  if (expansion < 1) throw ConfigError("SAE expansion must be positive");
  if (k < 1 || k > features()) {
    throw ConfigError("K must satisfy 1 <= K <= F (K=" + std::to_string(k) +
                      ", F=" + std::to_string(features()) + ")");
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (batch_patients < 1) throw ConfigError("batch size must be positive");
  if (resample_check_every < 1) throw ConfigError("resample_check_every must be positive");
  if (dead_window < resample_check_every) {
    throw ConfigError("dead_window must be at least resample_check_every");
  }
}

double SaeModel::decoder_norm_error() const {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < w_dec.cols(); ++j) {
    worst = std::max(worst, std::abs(static_cast<double>(w_dec.col(j).cast<double>().norm()) - 1.0));
  }
  return worst;
}

RowMatrixF SparseCode::to_dense() const {
  RowMatrixF out = RowMatrixF::Zero(rows(), n_features);
  for (Eigen::Index r = 0; r < rows(); ++r) {
    const auto idx = row_indices(r);
    const auto val = row_values(r);
    for (int s = 0; s < k; ++s) out(r, idx[static_cast<std::size_t>(s)]) = val[static_cast<std::size_t>(s)];
  }
  return out;
}

template <class S>
SaeParams<S> SaeParams<S>::zeros_like(const SaeParams& p) {
  SaeParams z;
  z.w_enc.setZero(p.w_enc.rows(), p.w_enc.cols());
  z.b_enc.setZero(p.b_enc.size());
  z.w_dec.setZero(p.w_dec.rows(), p.w_dec.cols());
  z.b_dec.setZero(p.b_dec.size());
  return z;
}

template struct SaeParams<float>;
template struct SaeParams<double>;

SaeParams<float> params_of(const SaeModel& sae) {
  return {sae.w_enc, sae.b_enc, sae.w_dec, sae.b_dec};
}

SaeParams<double> params_of_double(const SaeModel& sae) {
  return {sae.w_enc.cast<double>(), sae.b_enc.cast<double>(), sae.w_dec.cast<double>(),
          sae.b_dec.cast<double>()};
}

template <class S>
double masked_loss(const SaeParams<S>& p, const RowMat<S>& h, const SparseCode& support) {
  return masked_impl<S>(p, h, support, nullptr);
}

template <class S>
double masked_loss_and_grad(const SaeParams<S>& p, const RowMat<S>& h, const SparseCode& support,
                            SaeParams<S>& grad) {
  grad = SaeParams<S>::zeros_like(p);
  return masked_impl<S>(p, h, support, &grad);
}

template double masked_loss<float>(const SaeParams<float>&, const RowMat<float>&, const SparseCode&);
template double masked_loss<double>(const SaeParams<double>&, const RowMat<double>&, const SparseCode&);
template double masked_loss_and_grad<float>(const SaeParams<float>&, const RowMat<float>&,
                                            const SparseCode&, SaeParams<float>&);
template double masked_loss_and_grad<double>(const SaeParams<double>&, const RowMat<double>&,
                                             const SparseCode&, SaeParams<double>&);

SaeModel init_sae(const SaeConfig& config) {
  config.validate();
  SaeModel sae;
  sae.config = config;
  const int d = config.width;
  const int f = config.features();
  Rng rng(derive_seed(config.seed, 0x736165));
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  sae.w_dec.resize(d, f);
  for (Eigen::Index i = 0; i < sae.w_dec.size(); ++i) sae.w_dec.data()[i] = gauss(rng);
  renormalize_columns(sae.w_dec);
  sae.w_enc = sae.w_dec.transpose();
  sae.b_enc = VectorF::Zero(f);
  sae.b_dec = VectorF::Zero(d);
  return sae;
}

SparseCode topk_select(const RowMatrixF& pre, int k) {
  const auto f = static_cast<int>(pre.cols());
  if (k < 1 || k > f) throw ConfigError("K must satisfy 1 <= K <= F");
  SparseCode code;
  code.n_features = f;
  code.k = k;
  code.indices.resize(static_cast<std::size_t>(pre.rows() * k));
  code.values.resize(code.indices.size());
  std::vector<int> order(static_cast<std::size_t>(f));
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    const float* a = pre.row(r).data();
    auto before = [a](int i, int j) { return a[i] > a[j] || (a[i] == a[j] && i < j); };
    if (k < f) std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), before);
    std::sort(order.begin(), order.begin() + k);
    for (int s = 0; s < k; ++s) {
      const int j = order[static_cast<std::size_t>(s)];
      code.indices[static_cast<std::size_t>(r * k + s)] = j;
      code.values[static_cast<std::size_t>(r * k + s)] = std::max(a[j], 0.0f);
    }
  }
  return code;
}

SparseCode encode(const SaeModel& sae, const RowMatrixF& h) {
  if (h.cols() != sae.width()) {
    throw ConfigError("encode: input width " + std::to_string(h.cols()) + " does not match SAE width " +
                      std::to_string(sae.width()));
  }
  RowMatrixF pre = h * sae.w_enc.transpose();
  pre.rowwise() += sae.b_enc.transpose();
  return topk_select(pre, sae.k());
}

SparseCode encode(const SaeModel& sae, const Eigen::RowVectorXf& h) {
  return encode(sae, RowMatrixF(h));
}

RowMatrixF decode(const SaeModel& sae, const SparseCode& z) {
  if (z.n_features != sae.features()) throw ConfigError("decode: code F does not match SAE F");
  RowMatrixF out(z.rows(), sae.width());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::VectorXf acc = sae.b_dec;
    const auto idx = z.row_indices(r);
    const auto val = z.row_values(r);
    for (int s = 0; s < z.k; ++s) {
      const int j = idx[static_cast<std::size_t>(s)];
      if (j < 0 || j >= sae.features()) throw ConfigError("decode: feature index out of range");
      const float v = val[static_cast<std::size_t>(s)];
      if (v != 0.0f) acc.noalias() += v * sae.w_dec.col(j);
    }
    out.row(r) = acc.transpose();
  }
  return out;
}

RowMatrixF reconstruct(const SaeModel& sae, const RowMatrixF& h) { return decode(sae, encode(sae, h)); }

TrainState init_train_state(const SaeModel& sae) {
  TrainState s;
  const auto p = params_of(sae);
  s.m = SaeParams<float>::zeros_like(p);
  s.v = SaeParams<float>::zeros_like(p);
  s.last_active.assign(static_cast<std::size_t>(sae.features()), 0);
  return s;
}

double train_step(SaeModel& sae, TrainState& state, const RowMatrixF& batch) {
  if (batch.cols() != sae.width()) throw ConfigError("train_step: batch width does not match SAE width");
  const auto support = encode(sae, batch);
  auto params = params_of(sae);
  SaeParams<float> grad;
  const double loss = masked_loss_and_grad<float>(params, batch, support, grad);
  const std::int64_t step = state.step + 1;
  if (!std::isfinite(loss) || !grad.w_enc.allFinite() || !grad.w_dec.allFinite()) {
    throw NumericalError("non-finite SAE loss at step " + std::to_string(step));
  }
  state.step = step;
  const auto& c = sae.config;
  const auto b1 = static_cast<float>(c.beta1);
  const auto b2 = static_cast<float>(c.beta2);
  const double t = static_cast<double>(step);
  const auto lr_t = static_cast<float>(c.lr * std::sqrt(1.0 - std::pow(c.beta2, t)) / (1.0 - std::pow(c.beta1, t)));
  const auto eps = static_cast<float>(c.adam_eps);
  adam_update(sae.w_enc, grad.w_enc, state.m.w_enc, state.v.w_enc, b1, b2, lr_t, eps);
  adam_update(sae.b_enc, grad.b_enc, state.m.b_enc, state.v.b_enc, b1, b2, lr_t, eps);
  adam_update(sae.w_dec, grad.w_dec, state.m.w_dec, state.v.w_dec, b1, b2, lr_t, eps);
  adam_update(sae.b_dec, grad.b_dec, state.m.b_dec, state.v.b_dec, b1, b2, lr_t, eps);
  renormalize_columns(sae.w_dec);
  for (std::size_t i = 0; i < support.indices.size(); ++i) {
    if (support.values[i] > 0.0f) state.last_active[static_cast<std::size_t>(support.indices[i])] = step;
  }
  state.running_loss = step == 1 ? loss : 0.99 * state.running_loss + 0.01 * loss;
  return loss;
}

int dead_feature_count(const SaeModel& sae, const TrainState& state) {
  int dead = 0;
  for (int j = 0; j < sae.features(); ++j) {
    if (state.step - state.last_active[static_cast<std::size_t>(j)] >= sae.config.dead_window) ++dead;
  }
  return dead;
}

int resample_dead(SaeModel& sae, TrainState& state, const RowMatrixF& batch) {
  std::vector<int> dead;
  for (int j = 0; j < sae.features(); ++j) {
    if (state.step - state.last_active[static_cast<std::size_t>(j)] >= sae.config.dead_window) dead.push_back(j);
  }
  if (dead.empty() || batch.rows() == 0) return 0;

  const RowMatrixF resid = batch - reconstruct(sae, batch);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(batch.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  const Eigen::VectorXf row_loss = resid.rowwise().squaredNorm();
  std::stable_sort(rows.begin(), rows.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return row_loss[a] > row_loss[b]; });

  double alive_norm = 0.0;
  int alive = 0;
  for (int j = 0; j < sae.features(); ++j) {
    if (std::find(dead.begin(), dead.end(), j) == dead.end()) {
      alive_norm += sae.w_enc.row(j).norm();
      ++alive;
    }
  }
  const auto enc_norm = static_cast<float>(kResampleEncoderScale * (alive > 0 ? alive_norm / alive : 1.0));

  int count = 0;
  for (std::size_t i = 0; i < dead.size(); ++i) {
    const Eigen::Index r = rows[i % rows.size()];
    Eigen::VectorXf dir = resid.row(r).transpose();
    if (!(dir.norm() > 0.0f)) dir = batch.row(r).transpose();
    const float norm = dir.norm();
    if (!(norm > 0.0f)) continue;
    dir /= norm;
    const int j = dead[i];
    sae.w_dec.col(j) = dir;
    sae.w_enc.row(j) = enc_norm * dir.transpose();
    sae.b_enc[j] = 0.0f;
    state.m.w_dec.col(j).setZero();
    state.v.w_dec.col(j).setZero();
    state.m.w_enc.row(j).setZero();
    state.v.w_enc.row(j).setZero();
    state.m.b_enc[j] = 0.0f;
    state.v.b_enc[j] = 0.0f;
    state.last_active[static_cast<std::size_t>(j)] = state.step;
    ++count;
  }
  return count;
}

MatrixRowStream::MatrixRowStream(RowMatrixF rows, int rows_per_batch, std::uint64_t seed,
                                 std::optional<int> max_batches)
    : rows_(std::move(rows)), rows_per_batch_(rows_per_batch), rng_(derive_seed(seed, 0x726f77)),
      remaining_(max_batches) {
  if (rows_per_batch < 1) throw ConfigError("rows_per_batch must be positive");
  if (rows_.rows() == 0) throw ConfigError("row stream needs at least one row");
  order_.resize(static_cast<std::size_t>(rows_.rows()));
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::optional<RowMatrixF> MatrixRowStream::next_batch() {
  if (remaining_) {
    if (*remaining_ <= 0) return std::nullopt;
    --*remaining_;
  }
  RowMatrixF batch(rows_per_batch_, rows_.cols());
  for (int i = 0; i < rows_per_batch_; ++i) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    batch.row(i) = rows_.row(order_[cursor_++]);
  }
  return batch;
}

PatientStream::PatientStream(std::vector<RowMatrixF> per_patient, int patients_per_batch,
                             std::uint64_t seed)
    : patients_(std::move(per_patient)), per_batch_(patients_per_batch),
      rng_(derive_seed(seed, 0x706174)) {
  if (patients_per_batch < 1) throw ConfigError("patients_per_batch must be positive");
  if (patients_.empty()) throw ConfigError("patient stream needs at least one patient");
  order_.resize(patients_.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::optional<RowMatrixF> PatientStream::next_batch() {
  std::vector<std::size_t> picked;
  Eigen::Index total = 0;
  for (int i = 0; i < per_batch_; ++i) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    picked.push_back(order_[cursor_++]);
    total += patients_[picked.back()].rows();
  }
  RowMatrixF batch(total, patients_.front().cols());
  Eigen::Index at = 0;
  for (auto p : picked) {
    batch.middleRows(at, patients_[p].rows()) = patients_[p];
    at += patients_[p].rows();
  }
  return batch;
}

TrainResult train_sae(ActivationStream& stream, const SaeConfig& config) {
  TrainResult result{init_sae(config), {}};
  auto& sae = result.model;
  auto state = init_train_state(sae);
  for (int step = 1; step <= config.steps; ++step) {
    auto batch = stream.next_batch();
    if (!batch) {
      result.log.exhausted_at_step = step - 1;
      result.log.warnings.push_back(
          fmt::format("activation stream exhausted after {} of {} steps", step - 1, config.steps));
      break;
    }
    if (batch->cols() != config.width) {
      throw ConfigError(fmt::format("stream batch width {} does not match SAE width {}", batch->cols(),
                                    config.width));
    }
    const double loss = train_step(sae, state, *batch);
    int resampled = 0;
    int dead = -1;
    if (state.step % config.resample_check_every == 0) {
      dead = dead_feature_count(sae, state);
      resampled = resample_dead(sae, state, *batch);
    }
    if (state.step % kLogEvery == 0) {
      if (dead < 0) dead = dead_feature_count(sae, state);
      result.log.rows.push_back({state.step, loss, dead, resampled});
    }
  }
  return result;
}

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "step,loss,dead_count,resampled\n";
  for (const auto& r : log.rows) {
    out << r.step << ',' << fmt::format("{}", r.loss) << ',' << r.dead_count << ',' << r.resampled << '\n';
  }
  if (log.exhausted_at_step) out << "# stream exhausted at step " << *log.exhausted_at_step << '\n';
}

void save_sae(const std::filesystem::path& path, const SaeModel& sae) {
  binio::TensorArchive a;
  a.texts["config"] = config_text(sae.config);
  a.put("w_enc", sae.w_enc);
  a.put("b_enc", sae.b_enc);
  a.put("w_dec", RowMatrixF(sae.w_dec));
  a.put("b_dec", sae.b_dec);
  binio::write_archive(path, kSaeMagic, kSaeCheckpointVersion, a);
}

SaeModel load_sae(const std::filesystem::path& path, std::optional<int> expected_width) {
  const auto a = binio::read_archive(path, kSaeMagic, kSaeCheckpointVersion);
  SaeModel sae;
  sae.config = parse_config_text(a.text("config"));
  sae.config.validate();
  if (expected_width && *expected_width != sae.config.width) {
    throw ConfigError(fmt::format("SAE checkpoint '{}' has width {}, expected {}", path.string(),
                                  sae.config.width, *expected_width));
  }
  sae.w_enc = a.matrix("w_enc");
  sae.b_enc = a.vector("b_enc");
  sae.w_dec = a.matrix("w_dec");
  sae.b_dec = a.vector("b_dec");
  const int f = sae.config.features();
  if (sae.w_enc.rows() != f || sae.w_enc.cols() != sae.config.width || sae.w_dec.rows() != sae.config.width ||
      sae.w_dec.cols() != f || sae.b_enc.size() != f || sae.b_dec.size() != sae.config.width) {
    throw FormatError("SAE checkpoint tensor shapes disagree with its config");
  }
  return sae;
}

}  // namespace saelab
