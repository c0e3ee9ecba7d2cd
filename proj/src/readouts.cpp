#include "saelab/readouts.hpp"

#include "saelab/jobs.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace saelab {
namespace {

constexpr double kHoursPerDay = 24.0;
constexpr double kHoursPerYear = 365.0 * 24.0;

std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.6g}", v);
}

std::string duration_label(double hours) {
  auto whole = [](double v) { return std::abs(v - std::round(v)) < 1e-9; };
  if (whole(hours / kHoursPerYear)) return fmt::format("{}y", std::llround(hours / kHoursPerYear));
  if (whole(hours / kHoursPerDay) && hours >= kHoursPerDay * 7) return fmt::format("{}d", std::llround(hours / kHoursPerDay));
  if (whole(hours)) return fmt::format("{}h", std::llround(hours));
  return fmt::format("{}h", hours);
}

double parse_duration(const std::string& text) {
  if (text.size() < 2) throw ConfigError("bad window duration '" + text + "'");
  const char unit = text.back();
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(text.substr(0, text.size() - 1), &used);
    if (used != text.size() - 1) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw ConfigError("bad window duration '" + text + "'");
  }
  switch (unit) {
    case 'h': return v;
    case 'd': return v * kHoursPerDay;
    case 'y': return v * kHoursPerYear;
    default: throw ConfigError("bad window unit in '" + text + "' (use h, d or y)");
  }
}

RowMatrixD take_rows(const RowMatrixD& x, std::span<const int> rows) {
  RowMatrixD out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

template <class T>
std::vector<T> take(std::span<const T> v, std::span<const int> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

bool both_classes(std::span<const int> labels) {
  bool pos = false, neg = false;
  for (int l : labels) (l ? pos : neg) = true;
  return pos && neg;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Stratified k-fold assignment: fold id per row.
std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
  std::vector<int> fold(labels.size(), 0);
  Rng rng(seed);
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if ((labels[i] != 0) == (cls == 1)) idx.push_back(static_cast<int>(i));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[static_cast<std::size_t>(idx[j])] = static_cast<int>(j % static_cast<std::size_t>(folds));
  }
  return fold;
}

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

WindowSpec WindowSpec::full() { return {}; }

WindowSpec WindowSpec::hours(double h) {
  WindowSpec w{WindowKind::hours, h, std::nullopt};
  w.validate();
  return w;
}

WindowSpec WindowSpec::days(double d) {
  WindowSpec w{WindowKind::days, d * kHoursPerDay, std::nullopt};
  w.validate();
  return w;
}

WindowSpec WindowSpec::obs_outcome(double obs_hours, double outcome_hours) {
  WindowSpec w{WindowKind::obs_outcome, obs_hours, outcome_hours};
  w.validate();
  return w;
}

WindowSpec WindowSpec::parse(const std::string& text) {
  if (text == "full") return full();
  if (const auto slash = text.find('/'); slash != std::string::npos) {
    return obs_outcome(parse_duration(text.substr(0, slash)), parse_duration(text.substr(slash + 1)));
  }
  const double h = parse_duration(text);
  return text.back() == 'h' ? hours(h) : WindowSpec{WindowKind::days, h, std::nullopt};
}

std::string WindowSpec::label() const {
  switch (kind) {
    case WindowKind::full: return "full";
    case WindowKind::hours: return duration_label(observation_limit);
    case WindowKind::days: return fmt::format("{}d", observation_limit / kHoursPerDay);
    case WindowKind::obs_outcome:
      return duration_label(observation_limit) + "/" + duration_label(outcome_horizon.value_or(0.0));
  }
  return "?";
}

void WindowSpec::validate() const {
  if (kind == WindowKind::full) return;
  if (!(observation_limit > 0.0)) throw ConfigError("window observation limit must be positive");
  if (kind == WindowKind::obs_outcome && !(outcome_horizon && *outcome_horizon > 0.0)) {
    throw ConfigError("obs/outcome window needs a positive outcome horizon");
  }
}

PatientRecord truncate_to_window(const PatientRecord& patient, const WindowSpec& window) {
  window.validate();
  if (window.kind == WindowKind::full) return patient;
  PatientRecord out = patient;
  out.token_ids.clear();
  out.time_deltas.clear();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < patient.token_ids.size(); ++i) {
    cumulative += patient.time_deltas[i];
    if (cumulative > window.observation_limit) break;
    out.token_ids.push_back(patient.token_ids[i]);
    out.time_deltas.push_back(patient.time_deltas[i]);
  }
  if (window.kind == WindowKind::obs_outcome) {
    out.died = patient.died &&
               patient.time_to_event_hours <= window.observation_limit + *window.outcome_horizon;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patient matrices
// ---------------------------------------------------------------------------

std::string to_string(Representation r) {
  switch (r) {
    case Representation::sae: return "sae";
    case Representation::dense: return "dense";
    case Representation::bot: return "bot";
    case Representation::presence: return "presence";
    case Representation::seqlen: return "seqlen";
  }
  return "?";
}

Representation parse_representation(const std::string& text) {
  for (auto r : {Representation::sae, Representation::dense, Representation::bot, Representation::presence,
                 Representation::seqlen}) {
    if (to_string(r) == text) return r;
  }
  throw ConfigError("unknown representation '" + text + "'");
}

void PatientFeatureMatrix::validate() const {
  const auto n = static_cast<std::size_t>(rows.rows());
  if (died.size() != n || los_hours.size() != n || time_to_event.size() != n || patient_ids.size() != n) {
    throw ConfigError("patient matrix: row and label counts differ");
  }
  if (!rows.allFinite()) throw NumericalError("patient matrix contains non-finite values");
}

PatientFeatureMatrix PatientFeatureMatrix::subset(std::span<const int> keep) const {
  PatientFeatureMatrix out;
  out.tag = tag;
  out.rows = take_rows(rows, keep);
  out.died = take<int>(died, keep);
  out.los_hours = take<double>(los_hours, keep);
  out.time_to_event = take<double>(time_to_event, keep);
  out.patient_ids = take<int>(patient_ids, keep);
  out.n_excluded = n_excluded;
  return out;
}

Eigen::RowVectorXd pool_dense(const RowMatrixF& states) {
  if (states.rows() == 0) throw ConfigError("cannot pool an empty sequence");
  return states.cast<double>().colwise().mean();
}

Eigen::RowVectorXd pool_codes(const SparseCode& code) {
  if (code.rows() == 0) throw ConfigError("cannot pool an empty sequence");
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(code.n_features);
  for (Eigen::Index r = 0; r < code.rows(); ++r) {
    const auto idx = code.row_indices(r);
    const auto val = code.row_values(r);
    for (int s = 0; s < code.k; ++s) out(idx[static_cast<std::size_t>(s)]) += val[static_cast<std::size_t>(s)];
  }
  return out / static_cast<double>(code.rows());
}

std::vector<RowMatrixF> patient_states(const ModelWeights& weights, std::span<const PatientRecord> patients,
                                       const Vocabulary& vocab, int layer, std::vector<int>& kept) {
  kept.clear();
  std::vector<RowMatrixF> out;
  const std::set<int> layers{layer};
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto tokens = input_tokens(patients[i], vocab);
    if (tokens.empty()) continue;
    auto fwd = forward_collect(weights, tokens, layers, std::nullopt, static_cast<std::uint32_t>(i));
    out.push_back(std::move(fwd.batches.front().states));
    kept.push_back(static_cast<int>(i));
  }
  return out;
}

PatientFeatureMatrix pool_from_states(Representation tag, std::span<const RowMatrixF> states,
                                      std::span<const int> kept, std::span<const PatientRecord> patients,
                                      const SaeModel* sae) {
  if (tag != Representation::sae && tag != Representation::dense) {
    throw ConfigError("model pooling supports only sae and dense representations");
  }
  if (tag == Representation::sae && sae == nullptr) throw ConfigError("sae pooling requires an SAE");
  if (states.empty()) throw ConfigError("no patients to pool");
  if (states.size() != kept.size()) throw ConfigError("state and index counts differ");
  PatientFeatureMatrix m;
  m.tag = tag;
  const Eigen::Index width = tag == Representation::sae ? sae->features() : states.front().cols();
  m.rows.resize(static_cast<Eigen::Index>(states.size()), width);
  for (std::size_t i = 0; i < states.size(); ++i) {
    m.rows.row(static_cast<Eigen::Index>(i)) =
        tag == Representation::sae ? pool_codes(encode(*sae, states[i])) : pool_dense(states[i]);
    const auto& p = patients[static_cast<std::size_t>(kept[i])];
    m.died.push_back(p.died ? 1 : 0);
    m.los_hours.push_back(p.los_hours);
    m.time_to_event.push_back(p.time_to_event_hours);
    m.patient_ids.push_back(kept[i]);
  }
  m.n_excluded = static_cast<int>(patients.size() - kept.size());
  return m;
}

PatientFeatureMatrix pool_patient(Representation tag, const ModelWeights& weights,
                                  std::span<const PatientRecord> patients, const Vocabulary& vocab, int layer,
                                  const SaeModel* sae) {
  if (patients.empty()) throw ConfigError("empty patient set");
  if (tag == Representation::sae && sae == nullptr) throw ConfigError("sae pooling requires an SAE");
  std::vector<int> kept;
  const auto states = patient_states(weights, patients, vocab, layer, kept);
  return pool_from_states(tag, states, kept, patients, sae);
}

BaselineSet baselines(std::span<const PatientRecord> patients, const Vocabulary& vocab, bool exclude_empty) {
  std::vector<int> column(static_cast<std::size_t>(vocab.size()), -1);
  int n_cols = 0;
  for (int t = 0; t < vocab.size(); ++t) {
    if (!vocab.is_special(t)) column[static_cast<std::size_t>(t)] = n_cols++;
  }
  std::vector<Eigen::RowVectorXd> counts;
  std::vector<int> kept;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(n_cols);
    for (int t : patients[i].token_ids) {
      if (t < 0 || t >= vocab.size()) throw ConfigError("token id outside vocabulary");
      if (column[static_cast<std::size_t>(t)] >= 0) c(column[static_cast<std::size_t>(t)]) += 1.0;
    }
    if (exclude_empty && c.sum() == 0.0) continue;
    counts.push_back(std::move(c));
    kept.push_back(static_cast<int>(i));
  }
  BaselineSet out;
  out.bot.tag = Representation::bot;
  out.presence.tag = Representation::presence;
  out.seqlen.tag = Representation::seqlen;
  const auto n = static_cast<Eigen::Index>(counts.size());
  out.bot.rows.resize(n, n_cols);
  out.presence.rows.resize(n, n_cols);
  out.seqlen.rows.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = counts[static_cast<std::size_t>(i)];
    const double total = c.sum();
    out.bot.rows.row(i) = total > 0.0 ? Eigen::RowVectorXd(c / total) : c;
    out.presence.rows.row(i) = (c.array() > 0.0).cast<double>().matrix();
    out.seqlen.rows(i, 0) = total;
  }
  for (auto* m : {&out.bot, &out.presence, &out.seqlen}) {
    for (int i : kept) {
      const auto& p = patients[static_cast<std::size_t>(i)];
      m->died.push_back(p.died ? 1 : 0);
      m->los_hours.push_back(p.los_hours);
      m->time_to_event.push_back(p.time_to_event_hours);
      m->patient_ids.push_back(i);
    }
    m->n_excluded = static_cast<int>(patients.size() - kept.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ConfigError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  double n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        pos_rank_sum += mid;
        n_pos += 1.0;
      } else {
        n_neg += 1.0;
      }
    }
    i = j;
  }
  if (n_pos == 0.0 || n_neg == 0.0) throw ConfigError("auc needs both classes");
  const double u = pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * n_neg);
}

double harrell_c(std::span<const double> scores, std::span<const double> times, std::span<const int> events) {
  const std::size_t n = scores.size();
  if (times.size() != n || events.size() != n) throw ConfigError("harrell c: input lengths differ");
  std::vector<double> uniq(scores.begin(), scores.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  auto rank_of = [&](double s) {
    return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), s) - uniq.begin()) + 1;
  };
  std::vector<std::int64_t> tree(uniq.size() + 1, 0);
  auto add = [&](std::size_t i) {
    for (; i < tree.size(); i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t i) {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return times[a] > times[b]; });
  std::int64_t concordant = 0, tied = 0, comparable = 0, inserted = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && times[order[j]] == times[order[i]]) ++j;
    for (std::size_t t = i; t < j; ++t) {
      const auto s = order[t];
      if (!events[s]) continue;
      const auto r = rank_of(scores[s]);
      const std::int64_t below = prefix(r - 1);
      const std::int64_t equal = prefix(r) - below;
      concordant += below;
      tied += equal;
      comparable += inserted;
    }
    for (std::size_t t = i; t < j; ++t) {
      add(rank_of(scores[order[t]]));
      ++inserted;
    }
    i = j;
  }
  if (comparable == 0) throw ConfigError("harrell c: no comparable pairs");
  return static_cast<double>(2 * concordant + tied) / static_cast<double>(2 * comparable);
}

double r_squared(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size() || y.empty()) throw ConfigError("r2: bad input lengths");
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sse += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    sst += (y[i] - mean) * (y[i] - mean);
  }
  if (!(sst > 0.0)) throw NumericalError("r2: constant target");
  return 1.0 - sse / sst;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const RowMatrixD& x) {
  if (x.rows() == 0) throw ConfigError("cannot standardize an empty matrix");
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale = ((x.rowwise() - s.mean).array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
  for (Eigen::Index j = 0; j < s.scale.size(); ++j) {
    if (!(s.scale(j) > 1e-12)) s.scale(j) = 1.0;
  }
  return s;
}

RowMatrixD Standardizer::apply(const RowMatrixD& x) const {
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

Eigen::VectorXd LogisticModel::decision(const RowMatrixD& x) const {
  return (x * w).array() + b;
}

LogisticModel fit_logistic(const RowMatrixD& x, std::span<const int> y, double c, int max_iter) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw ConfigError("logistic: row/label mismatch");
  if (!(c > 0.0)) throw ConfigError("logistic: C must be positive");
  if (!both_classes(y)) throw ConfigError("degenerate labels");
  const Eigen::Index n = x.rows(), p = x.cols();
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  auto objective = [&](const Eigen::VectorXd& w, double b) {
    const Eigen::VectorXd s = (x * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double si = s(i);
      loss += std::max(si, 0.0) + std::log1p(std::exp(-std::abs(si))) - yv(i) * si;
    }
    return 0.5 * w.squaredNorm() + c * loss;
  };

  LogisticModel m;
  m.w = Eigen::VectorXd::Zero(p);
  double f = objective(m.w, m.b);
  for (int it = 0; it < max_iter; ++it) {
    m.iterations = it + 1;
    const Eigen::VectorXd s = (x * m.w).array() + m.b;
    const Eigen::VectorXd prob = 1.0 / (1.0 + (-s.array()).exp());
    const Eigen::VectorXd r = prob - yv;
    const Eigen::VectorXd wt = (prob.array() * (1.0 - prob.array())).max(1e-12);
    Eigen::VectorXd g(p + 1);
    g.head(p) = m.w + c * (x.transpose() * r);
    g(p) = c * r.sum();
    if (g.lpNorm<Eigen::Infinity>() < 1e-9 * std::max(1.0, c * static_cast<double>(n) * 1e-3)) {
      m.converged = true;
      break;
    }
    Eigen::MatrixXd h(p + 1, p + 1);
    const RowMatrixD xw = x.array().colwise() * wt.array();
    h.topLeftCorner(p, p) = c * (x.transpose() * xw);
    h.topLeftCorner(p, p).diagonal().array() += 1.0;
    const Eigen::VectorXd xt_wt = c * (x.transpose() * wt);
    h.block(0, p, p, 1) = xt_wt;
    h.block(p, 0, 1, p) = xt_wt.transpose();
    h(p, p) = c * wt.sum() + 1e-10;
    const Eigen::VectorXd step = -h.ldlt().solve(g);
    if (!step.allFinite()) throw NumericalError("logistic: singular Newton system");
    const double slope = g.dot(step);
    double t = 1.0;
    Eigen::VectorXd w_new;
    double b_new = 0.0, f_new = 0.0;
    for (int ls = 0; ls < 40; ++ls) {
      w_new = m.w + t * step.head(p);
      b_new = m.b + t * step(p);
      f_new = objective(w_new, b_new);
      if (f_new <= f + 1e-4 * t * slope) break;
      t *= 0.5;
    }
    const double moved = t * step.lpNorm<Eigen::Infinity>();
    m.w = w_new;
    m.b = b_new;
    const double df = f - f_new;
    f = f_new;
    if (moved < 1e-10 * (1.0 + m.w.lpNorm<Eigen::Infinity>()) || (df >= 0.0 && df < 1e-14 * (1.0 + std::abs(f)))) {
      m.converged = true;
      break;
    }
  }
  return m;
}

std::pair<std::vector<int>, std::vector<int>> stratified_split(std::span<const int> labels, double test_fraction,
                                                               std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
  Rng rng(seed);
  std::vector<int> train, test;
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if ((labels[i] != 0) == (cls == 1)) idx.push_back(static_cast<int>(i));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::pair<double, double> bootstrap_ci(int n, int resamples, std::uint64_t seed,
                                       const std::function<std::optional<double>(std::span<const int>)>& metric,
                                       int* used) {
  if (n <= 0 || resamples <= 0) throw ConfigError("bootstrap needs a nonempty sample and resample count");
  Rng rng(seed);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(resamples));
  std::vector<int> idx(static_cast<std::size_t>(n));
  constexpr int kMaxRedraws = 100;
  for (int r = 0; r < resamples; ++r) {
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
      for (auto& i : idx) i = static_cast<int>(uniform01(rng) * n);
      if (auto v = metric(idx)) {
        values.push_back(*v);
        break;
      }
    }
  }
  if (used) *used = static_cast<int>(values.size());
  if (values.empty()) throw NumericalError("bootstrap: metric undefined on every resample");
  std::sort(values.begin(), values.end());
  return {quantile_sorted(values, 0.025), quantile_sorted(values, 0.975)};
}

ProbeResult logistic_probe(const PatientFeatureMatrix& x, std::span<const int> labels, std::uint64_t split_seed,
                           const ProbeConfig& config) {
  if (static_cast<std::size_t>(x.n()) != labels.size()) throw ConfigError("probe: row/label mismatch");
  if (x.n() == 0) throw ConfigError("probe: empty patient matrix");
  if (config.c_grid.empty() || config.folds < 2) throw ConfigError("probe: bad CV configuration");
  auto [train, test] = stratified_split(labels, config.test_fraction, derive_seed(split_seed, 1));
  const auto y_train = take<int>(labels, train);
  const auto y_test = take<int>(labels, test);
  if (!both_classes(y_train)) throw ConfigError("degenerate labels");
  if (!both_classes(y_test)) throw ConfigError("degenerate labels in test split");
  const RowMatrixD x_train = take_rows(x.rows, train);
  const RowMatrixD x_test = take_rows(x.rows, test);

  const auto folds = stratified_folds(y_train, config.folds, derive_seed(split_seed, 2));
  double best_auc = -1.0;
  double best_c = config.c_grid.front();
  std::vector<double> grid = config.c_grid;
  std::sort(grid.begin(), grid.end());
  for (double c : grid) {
    double total = 0.0;
    int counted = 0;
    for (int f = 0; f < config.folds; ++f) {
      std::vector<int> tr, va;
      for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == f ? va : tr).push_back(static_cast<int>(i));
      const auto ytr = take<int>(y_train, tr);
      const auto yva = take<int>(y_train, va);
      if (!both_classes(ytr) || !both_classes(yva)) continue;
      const RowMatrixD xtr = take_rows(x_train, tr);
      const auto st = Standardizer::fit(xtr);
      const auto model = fit_logistic(st.apply(xtr), ytr, c);
      const auto scores = to_std(model.decision(st.apply(take_rows(x_train, va))));
      total += auc_roc(scores, yva);
      ++counted;
    }
    if (counted == 0) throw ConfigError("too few events for cross-validation");
    const double mean_auc = total / counted;
    if (mean_auc > best_auc) {
      best_auc = mean_auc;
      best_c = c;
    }
  }

  const auto st = Standardizer::fit(x_train);
  const auto model = fit_logistic(st.apply(x_train), y_train, best_c);
  ProbeResult r;
  r.test_scores = to_std(model.decision(st.apply(x_test)));
  r.auc = auc_roc(r.test_scores, y_test);
  r.chosen_c = best_c;
  r.n_train = static_cast<int>(train.size());
  r.n_test = static_cast<int>(test.size());
  r.n_events = static_cast<int>(std::count(y_test.begin(), y_test.end(), 1));
  r.underpowered = r.n_events < config.min_test_events;
  const auto& scores = r.test_scores;
  auto [lo, hi] = bootstrap_ci(r.n_test, config.bootstrap, derive_seed(split_seed, 3),
                               [&](std::span<const int> idx) -> std::optional<double> {
                                 const auto s = take<double>(scores, idx);
                                 const auto l = take<int>(y_test, idx);
                                 if (!both_classes(l)) return std::nullopt;
                                 return auc_roc(s, l);
                               },
                               &r.bootstrap_n);
  r.ci_low = std::min(lo, r.auc);
  r.ci_high = std::max(hi, r.auc);
  r.test_rows = std::move(test);
  return r;
}

ProbeResult logistic_probe(const PatientFeatureMatrix& x, std::uint64_t split_seed, const ProbeConfig& config) {
  return logistic_probe(x, x.died, split_seed, config);
}

namespace {

struct RidgeFit {
  Eigen::VectorXd w;
  double b = 0.0;
};

RidgeFit fit_ridge(const RowMatrixD& xs, const Eigen::VectorXd& y, double lambda) {
  RidgeFit f;
  f.b = y.mean();
  Eigen::MatrixXd a = xs.transpose() * xs;
  a.diagonal().array() += lambda;
  f.w = a.ldlt().solve(xs.transpose() * (y.array() - f.b).matrix());
  return f;
}

}  // namespace

RidgeResult ridge_probe(const RowMatrixD& x, std::span<const double> y, std::uint64_t split_seed,
                        const ProbeConfig& config) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw ConfigError("ridge: row/target mismatch");
  if (x.rows() < 2 * config.folds) throw ConfigError("ridge: too few rows");
  for (double v : y) {
    if (!std::isfinite(v)) throw ConfigError("ridge: non-finite target");
  }
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) throw ConfigError("ridge: constant target");
  const std::vector<int> zeros(y.size(), 0);
  auto [train, test] = stratified_split(zeros, config.test_fraction, derive_seed(split_seed, 11));
  const RowMatrixD x_train = take_rows(x, train);
  const RowMatrixD x_test = take_rows(x, test);
  const auto y_train_v = take<double>(y, train);
  const auto y_test = take<double>(y, test);
  const Eigen::VectorXd y_train = Eigen::Map<const Eigen::VectorXd>(y_train_v.data(), static_cast<Eigen::Index>(y_train_v.size()));

  std::vector<int> fold(train.size());
  for (std::size_t i = 0; i < fold.size(); ++i) fold[i] = static_cast<int>(i % static_cast<std::size_t>(config.folds));
  Rng rng(derive_seed(split_seed, 12));
  std::shuffle(fold.begin(), fold.end(), rng);

  std::vector<double> grid = config.ridge_grid;
  std::sort(grid.begin(), grid.end(), std::greater<>());  // ties keep the stronger penalty
  double best = -std::numeric_limits<double>::infinity();
  double best_lambda = grid.front();
  for (double lambda : grid) {
    double total = 0.0;
    int counted = 0;
    for (int f = 0; f < config.folds; ++f) {
      std::vector<int> tr, va;
      for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? va : tr).push_back(static_cast<int>(i));
      const auto yva = take<double>(y_train_v, va);
      if (std::all_of(yva.begin(), yva.end(), [&](double v) { return v == yva[0]; })) continue;
      const RowMatrixD xtr = take_rows(x_train, tr);
      const auto st = Standardizer::fit(xtr);
      const auto ytr = take<double>(y_train_v, tr);
      const auto fit = fit_ridge(st.apply(xtr), Eigen::Map<const Eigen::VectorXd>(ytr.data(), static_cast<Eigen::Index>(ytr.size())), lambda);
      const Eigen::VectorXd pred = (st.apply(take_rows(x_train, va)) * fit.w).array() + fit.b;
      total += r_squared(yva, to_std(pred));
      ++counted;
    }
    if (counted == 0) throw ConfigError("ridge: no usable CV fold");
    if (total / counted > best) {
      best = total / counted;
      best_lambda = lambda;
    }
  }
  const auto st = Standardizer::fit(x_train);
  const auto fit = fit_ridge(st.apply(x_train), y_train, best_lambda);
  const auto pred = to_std(Eigen::VectorXd((st.apply(x_test) * fit.w).array() + fit.b));
  RidgeResult r;
  r.chosen_lambda = best_lambda;
  r.n_train = static_cast<int>(train.size());
  r.n_test = static_cast<int>(test.size());
  r.r2 = r_squared(y_test, pred);
  auto [lo, hi] = bootstrap_ci(r.n_test, config.bootstrap, derive_seed(split_seed, 13),
                               [&](std::span<const int> idx) -> std::optional<double> {
                                 const auto yy = take<double>(y_test, idx);
                                 if (std::all_of(yy.begin(), yy.end(), [&](double v) { return v == yy[0]; })) {
                                   return std::nullopt;
                                 }
                                 return r_squared(yy, take<double>(pred, idx));
                               },
                               &r.bootstrap_n);
  r.ci_low = std::min(lo, r.r2);
  r.ci_high = std::max(hi, r.r2);
  return r;
}

RidgeResult ridge_probe(const PatientFeatureMatrix& x, std::uint64_t split_seed, const ProbeConfig& config) {
  std::vector<double> y;
  y.reserve(x.los_hours.size());
  for (double h : x.los_hours) {
    if (!(h > 0.0)) throw ConfigError("ridge: length of stay must be positive");
    y.push_back(std::log(h));
  }
  return ridge_probe(x.rows, y, split_seed, config);
}

std::vector<GroupProbeRow> group_stratified_probe(const PatientFeatureMatrix& x, std::span<const std::string> groups,
                                                  std::uint64_t split_seed, const ProbeConfig& config) {
  if (static_cast<std::size_t>(x.n()) != groups.size()) throw ConfigError("group labels must cover every patient");
  const auto global = logistic_probe(x, split_seed, config);
  std::map<std::string, std::vector<std::size_t>> by_group;  // positions within the test split
  for (const auto& g : groups) by_group[g];
  for (std::size_t t = 0; t < global.test_rows.size(); ++t) {
    by_group[groups[static_cast<std::size_t>(global.test_rows[t])]].push_back(t);
  }
  std::vector<GroupProbeRow> out;
  std::uint64_t tag = 0;
  for (const auto& [g, pos] : by_group) {
    GroupProbeRow row;
    row.group = g;
    row.n_test = static_cast<int>(pos.size());
    std::vector<double> s;
    std::vector<int> l;
    for (auto t : pos) {
      s.push_back(global.test_scores[t]);
      l.push_back(x.died[static_cast<std::size_t>(global.test_rows[t])]);
    }
    row.n_events = static_cast<int>(std::count(l.begin(), l.end(), 1));
    row.underpowered = row.n_events < config.min_test_events;
    ++tag;
    if (pos.empty()) {
      row.note = "absent from test split";
    } else if (!both_classes(l)) {
      row.note = "single class in test split";
    } else {
      row.auc = auc_roc(s, l);
      auto [lo, hi] = bootstrap_ci(row.n_test, config.bootstrap, derive_seed(split_seed, 21, tag),
                                   [&](std::span<const int> idx) -> std::optional<double> {
                                     const auto ll = take<int>(l, idx);
                                     if (!both_classes(ll)) return std::nullopt;
                                     return auc_roc(take<double>(s, idx), ll);
                                   });
      row.ci_low = std::min(lo, row.auc);
      row.ci_high = std::max(hi, row.auc);
    }
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Survival
// ---------------------------------------------------------------------------

namespace {

struct CoxTerms {
  double loglik = 0.0;
  double score = 0.0;
  double information = 0.0;
};

CoxTerms cox_terms(const std::vector<double>& x, std::span<const double> times, std::span<const int> events,
                   const std::vector<std::size_t>& order, double beta) {
  CoxTerms out;
  double s0 = 0.0, s1 = 0.0, s2 = 0.0;
  const std::size_t n = order.size();
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && times[order[j]] == times[order[i]]) ++j;
    double d = 0.0, xsum = 0.0;
    for (std::size_t t = i; t < j; ++t) {
      const auto k = order[t];
      const double e = std::exp(beta * x[k]);
      s0 += e;
      s1 += e * x[k];
      s2 += e * x[k] * x[k];
      if (events[k]) {
        d += 1.0;
        xsum += x[k];
      }
    }
    if (d > 0.0) {
      const double m1 = s1 / s0;
      out.loglik += beta * xsum - d * std::log(s0);
      out.score += xsum - d * m1;
      out.information += d * (s2 / s0 - m1 * m1);
    }
    i = j;
  }
  return out;
}

}  // namespace

CoxResult cox_univariate(std::span<const double> x, std::span<const double> times, std::span<const int> events) {
  const std::size_t n = x.size();
  if (times.size() != n || events.size() != n) throw ConfigError("cox: input lengths differ");
  if (std::none_of(events.begin(), events.end(), [](int e) { return e != 0; })) throw ConfigError("cox: no events");
  for (double t : times) {
    if (!(t > 0.0)) throw ConfigError("cox: times must be positive");
  }
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  std::vector<double> xc(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    xc[i] = x[i] - mean;
    var += xc[i] * xc[i];
  }
  if (!(var > 0.0)) throw ConfigError("cox: zero-variance feature");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return times[a] > times[b]; });

  constexpr int kMaxIter = 50;
  constexpr double kTol = 1e-8;
  CoxResult r;
  double beta = 0.0;
  auto terms = cox_terms(xc, times, events, order, beta);
  for (int it = 0; it < kMaxIter; ++it) {
    r.iterations = it + 1;
    if (!(terms.information > 0.0) || !std::isfinite(terms.loglik)) break;
    double step = terms.score / terms.information;
    double next = beta + step;
    auto next_terms = cox_terms(xc, times, events, order, next);
    for (int half = 0; half < 30 && !(next_terms.loglik >= terms.loglik); ++half) {
      step *= 0.5;
      next = beta + step;
      next_terms = cox_terms(xc, times, events, order, next);
    }
    beta = next;
    terms = next_terms;
    if (std::abs(step) <= kTol) {
      r.converged = true;
      break;
    }
  }
  r.beta = beta;
  r.hazard_ratio = std::exp(beta);
  if (terms.information > 0.0 && std::isfinite(terms.information)) {
    r.se = 1.0 / std::sqrt(terms.information);
    r.p_value = std::clamp(std::erfc(std::abs(beta / r.se) / std::sqrt(2.0)), 0.0, 1.0);
  } else {
    r.se = std::numeric_limits<double>::infinity();
    r.p_value = 1.0;
    r.converged = false;
  }
  return r;
}

std::vector<CoxResult> cox_screen(const RowMatrixD& x, std::span<const double> times, std::span<const int> events,
                                  double alpha_family) {
  if (x.cols() == 0) throw ConfigError("cox screen: no features");
  if (!(alpha_family > 0.0 && alpha_family < 1.0)) throw ConfigError("cox screen: alpha must lie in (0, 1)");
  const double threshold = alpha_family / static_cast<double>(x.cols());
  std::vector<CoxResult> out;
  std::vector<double> col(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) col[static_cast<std::size_t>(i)] = x(i, j);
    CoxResult r;
    if (std::all_of(col.begin(), col.end(), [&](double v) { return v == col[0]; })) {
      r.p_value = 1.0;
    } else {
      r = cox_univariate(col, times, events);
    }
    r.feature_id = static_cast<int>(j);
    r.significant_bonferroni = r.p_value <= threshold;
    out.push_back(r);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.p_value < b.p_value; });
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void write_results_csv(const std::filesystem::path& path, std::span<const ResultRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "representation,window,metric,value,ci_low,ci_high,n_events,underpowered\n";
  for (const auto& r : rows) {
    out << r.representation << ',' << r.window << ',' << r.metric << ',' << csv_num(r.value) << ','
        << csv_num(r.ci_low) << ',' << csv_num(r.ci_high) << ',' << r.n_events << ',' << (r.underpowered ? 1 : 0)
        << '\n';
  }
}

void write_cox_csv(const std::filesystem::path& path, std::span<const CoxResult> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "feature_id,beta,hazard_ratio,se,p_value,significant_bonferroni,converged\n";
  for (const auto& r : rows) {
    out << r.feature_id << ',' << csv_num(r.beta) << ',' << csv_num(r.hazard_ratio) << ',' << csv_num(r.se) << ','
        << csv_num(r.p_value) << ',' << (r.significant_bonferroni ? 1 : 0) << ',' << (r.converged ? 1 : 0) << '\n';
  }
}

std::vector<KSensitivityRow> k_sensitivity(const ModelWeights& weights, std::span<const PatientRecord> patients,
                                           const Vocabulary& vocab, int layer, std::span<const int> k_values,
                                           const SaeConfig& base, std::uint64_t split_seed,
                                           const ProbeConfig& config, int jobs) {
  if (k_values.empty()) throw ConfigError("k sensitivity: no K values");
  std::vector<int> kept;
  const auto states = patient_states(weights, patients, vocab, layer, kept);
  if (states.empty()) throw ConfigError("k sensitivity: no patients with tokens");

  struct Cell {
    ProbeResult mortality;
    RidgeResult los;
  };
  std::vector<int> ks(k_values.begin(), k_values.end());
  // Cell ks.size() is the dense reference.
  auto cells = run_jobs_or_throw<Cell>(ks.size() + 1, jobs, [&](std::size_t c) {
    PatientFeatureMatrix m;
    if (c == ks.size()) {
      m = pool_from_states(Representation::dense, states, kept, patients);
    } else {
      SaeConfig cfg = base;
      cfg.width = weights.config.width;
      cfg.k = ks[c];
      PatientStream stream(states, cfg.batch_patients, cfg.seed);
      const auto trained = train_sae(stream, cfg);
      m = pool_from_states(Representation::sae, states, kept, patients, &trained.model);
    }
    return Cell{logistic_probe(m, split_seed, config), ridge_probe(m, split_seed, config)};
  });

  std::vector<KSensitivityRow> out;
  for (const char* task : {"mortality", "los"}) {
    for (std::size_t c = 0; c <= ks.size(); ++c) {
      KSensitivityRow row;
      row.task = task;
      row.representation = c == ks.size() ? "dense" : "sae";
      row.k = c == ks.size() ? 0 : ks[c];
      if (std::string(task) == "mortality") {
        row.value = cells[c].mortality.auc;
        row.ci_low = cells[c].mortality.ci_low;
        row.ci_high = cells[c].mortality.ci_high;
      } else {
        row.value = cells[c].los.r2;
        row.ci_low = cells[c].los.ci_low;
        row.ci_high = cells[c].los.ci_high;
      }
      out.push_back(row);
    }
  }
  return out;
}

void write_k_sensitivity_csv(const std::filesystem::path& path, std::span<const KSensitivityRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "task,representation,k,value,ci_low,ci_high\n";
  for (const auto& r : rows) {
    out << r.task << ',' << r.representation << ',' << r.k << ',' << csv_num(r.value) << ',' << csv_num(r.ci_low)
        << ',' << csv_num(r.ci_high) << '\n';
  }
}

}  // namespace saelab
