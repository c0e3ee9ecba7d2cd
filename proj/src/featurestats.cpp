#include "saelab/featurestats.hpp"

#include "saelab/jobs.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace saelab {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.6f}", v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Explained variance
// ---------------------------------------------------------------------------

ExplainedVarianceAccumulator::ExplainedVarianceAccumulator(int width)
    : mean_(VectorD::Zero(width)), m2_(VectorD::Zero(width)) {}

void ExplainedVarianceAccumulator::add(const RowMatrixF& h, const RowMatrixF& h_hat) {
  if (h.cols() != mean_.size() || h_hat.cols() != mean_.size() || h.rows() != h_hat.rows()) {
    throw ConfigError("explained variance: width mismatch");
  }
  const Eigen::Index nb = h.rows();
  if (nb == 0) return;
  const RowMatrixD hd = h.cast<double>();
  sse_ += (hd - h_hat.cast<double>()).squaredNorm();
  const VectorD batch_mean = hd.colwise().mean().transpose();
  const VectorD batch_m2 = (hd.rowwise() - batch_mean.transpose()).colwise().squaredNorm().transpose();
  const auto n_old = static_cast<double>(n_);
  const auto n_b = static_cast<double>(nb);
  const double n_new = n_old + n_b;
  const VectorD delta = batch_mean - mean_;
  mean_ += delta * (n_b / n_new);
  m2_ += batch_m2 + delta.cwiseProduct(delta) * (n_old * n_b / n_new);
  n_ += nb;
}

double ExplainedVarianceAccumulator::value() const {
  const double sst = m2_.sum();
  if (n_ == 0 || !(sst > 0.0)) throw NumericalError("degenerate variance");
  return 1.0 - sse_ / sst;
}

double explained_variance(const SaeModel& sae, std::span<const RowMatrixF> batches) {
  ExplainedVarianceAccumulator acc(sae.width());
  for (const auto& b : batches) acc.add(b, reconstruct(sae, b));
  return acc.value();
}

double explained_variance(const SaeModel& sae, ActivationStream& stream, int max_batches) {
  ExplainedVarianceAccumulator acc(sae.width());
  for (int i = 0; i < max_batches; ++i) {
    auto b = stream.next_batch();
    if (!b) break;
    acc.add(*b, reconstruct(sae, *b));
  }
  return acc.value();
}

double explained_variance(const SaeModel& sae, const RowMatrixF& rows) {
  return explained_variance(sae, std::span<const RowMatrixF>(&rows, 1));
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

FeatureProfile profile_from_masses(int feature_id, const std::map<int, double>& token_mass,
                                   const Vocabulary& vocab, double mass_floor) {
  if (!(mass_floor >= 0.0 && mass_floor < 0.5)) throw ConfigError("mass_floor must lie in [0, 0.5)");
  FeatureProfile p;
  p.feature_id = feature_id;
  p.token_mass = token_mass;
  for (const auto& [tok, m] : token_mass) p.total_mass += m;
  if (!(p.total_mass > 0.0)) return p;

  double kept_total = 0.0;
  double best = -1.0;
  for (const auto& [tok, m] : token_mass) {
    if (!(m > 0.0) || m < mass_floor * p.total_mass) continue;
    ++p.n_token_types;
    kept_total += m;
    p.category_mass[vocab.category_of(tok)] += m;
    if (m > best) {
      best = m;
      p.top_token = tok;
    }
  }
  p.top1_fraction = best / kept_total;
  double top_cat = 0.0;
  for (const auto& [cat, m] : p.category_mass) {
    const double q = m / kept_total;
    if (q > 0.0) p.category_entropy_nats -= q * std::log(q);
    top_cat = std::max(top_cat, q);
  }
  p.category_entropy_nats = std::max(0.0, p.category_entropy_nats);
  p.singleton = p.n_token_types == 1;
  p.single_category = p.category_mass.size() == 1;
  p.coherent_50 = top_cat > 0.5;
  p.concentrated_80 = top_cat > 0.8;
  return p;
}

void ProfileAccumulator::add(const SparseCode& code, std::span<const std::uint32_t> token_ids) {
  if (static_cast<std::size_t>(code.rows()) != token_ids.size()) {
    throw ConfigError("profile accumulation: token ids disagree with code rows");
  }
  if (static_cast<std::size_t>(code.n_features) != masses_.size()) {
    throw ConfigError("profile accumulation: feature count mismatch");
  }
  for (Eigen::Index r = 0; r < code.rows(); ++r) {
    const auto idx = code.row_indices(r);
    const auto val = code.row_values(r);
    const int tok = static_cast<int>(token_ids[static_cast<std::size_t>(r)]);
    for (int s = 0; s < code.k; ++s) {
      const float v = val[static_cast<std::size_t>(s)];
      if (v > 0.0f) masses_[static_cast<std::size_t>(idx[static_cast<std::size_t>(s)])][tok] += v;
    }
  }
}

std::vector<FeatureProfile> ProfileAccumulator::profiles(const Vocabulary& vocab, double mass_floor) const {
  std::vector<FeatureProfile> out;
  out.reserve(masses_.size());
  for (std::size_t j = 0; j < masses_.size(); ++j) {
    out.push_back(profile_from_masses(static_cast<int>(j), masses_[j], vocab, mass_floor));
  }
  return out;
}

double ProfileAccumulator::total_mass() const {
  double total = 0.0;
  for (const auto& m : masses_) {
    for (const auto& [tok, v] : m) total += v;
  }
  return total;
}

std::vector<FeatureProfile> feature_profiles(const SaeModel& sae, std::span<const ActivationBatch> batches,
                                             const Vocabulary& vocab, double mass_floor) {
  ProfileAccumulator acc(sae.features());
  for (const auto& b : batches) {
    for (auto t : b.token_ids) {
      if (static_cast<int>(t) >= vocab.size()) throw ConfigError("token id outside vocabulary");
    }
    acc.add(encode(sae, b.states), b.token_ids);
  }
  return acc.profiles(vocab, mass_floor);
}

ComplexityReport complexity_summary(std::span<const FeatureProfile> profiles) {
  if (profiles.empty()) throw ConfigError("complexity summary needs at least one profile");
  ComplexityReport r;
  double tokens = 0.0, entropy = 0.0;
  int singleton = 0, single_cat = 0, coherent = 0, concentrated = 0;
  for (const auto& p : profiles) {
    if (!(p.total_mass > 0.0)) continue;
    ++r.n_features_active;
    tokens += p.n_token_types;
    entropy += p.category_entropy_nats;
    singleton += p.singleton;
    single_cat += p.single_category;
    coherent += p.coherent_50;
    concentrated += p.concentrated_80;
  }
  if (r.n_features_active == 0) throw NumericalError("all features have zero activation mass");
  const double n = r.n_features_active;
  r.singleton_pct = 100.0 * singleton / n;
  r.mean_tokens_per_feature = tokens / n;
  r.single_category_pct = 100.0 * single_cat / n;
  r.mean_category_entropy = entropy / n;
  r.coherent_pct = 100.0 * coherent / n;
  r.concentrated_pct = 100.0 * concentrated / n;
  return r;
}

std::string profiles_to_json(std::span<const FeatureProfile> profiles, const Vocabulary& vocab, int top_n) {
  std::vector<const FeatureProfile*> order;
  for (const auto& p : profiles) {
    if (p.total_mass > 0.0) order.push_back(&p);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->total_mass > b->total_mass; });
  if (top_n >= 0 && static_cast<std::size_t>(top_n) < order.size()) order.resize(static_cast<std::size_t>(top_n));
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto* p : order) {
    std::vector<std::pair<int, double>> toks(p->token_mass.begin(), p->token_mass.end());
    std::stable_sort(toks.begin(), toks.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (toks.size() > 10) toks.resize(10);
    nlohmann::ordered_json top = nlohmann::ordered_json::array();
    for (const auto& [t, m] : toks) top.push_back({{"token", vocab.token(t)}, {"mass", m}});
    nlohmann::ordered_json cats = nlohmann::ordered_json::object();
    for (const auto& [c, m] : p->category_mass) cats[c] = m;
    arr.push_back({{"feature_id", p->feature_id},
                   {"total_mass", p->total_mass},
                   {"n_token_types", p->n_token_types},
                   {"top_token", p->top_token >= 0 ? vocab.token(p->top_token) : ""},
                   {"top1_fraction", p->top1_fraction},
                   {"category_entropy_nats", p->category_entropy_nats},
                   {"singleton", p->singleton},
                   {"single_category", p->single_category},
                   {"coherent_50", p->coherent_50},
                   {"concentrated_80", p->concentrated_80},
                   {"category_mass", cats},
                   {"top_tokens", top}});
  }
  return arr.dump(2);
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

std::vector<int> hungarian_maximize(const MatrixD& score) {
  const auto rows = static_cast<int>(score.rows());
  const auto cols = static_cast<int>(score.cols());
  if (rows == 0 || cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
  if (rows > cols) {
    const auto t = hungarian_maximize(score.transpose());
    std::vector<int> out(static_cast<std::size_t>(rows), -1);
    for (int c = 0; c < cols; ++c) {
      if (t[static_cast<std::size_t>(c)] >= 0) out[static_cast<std::size_t>(t[static_cast<std::size_t>(c)])] = c;
    }
    return out;
  }
  // Minimize cost = -score with row/column potentials (1-based, column 0 sentinel).
  const int n = rows, m = cols;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = -score(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) out[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return out;
}

std::vector<int> greedy_maximize(const MatrixD& score) {
  std::vector<std::tuple<double, int, int>> entries;
  for (Eigen::Index i = 0; i < score.rows(); ++i) {
    for (Eigen::Index j = 0; j < score.cols(); ++j) {
      entries.emplace_back(score(i, j), static_cast<int>(i), static_cast<int>(j));
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::vector<int> out(static_cast<std::size_t>(score.rows()), -1);
  std::vector<char> col_used(static_cast<std::size_t>(score.cols()), 0);
  for (const auto& [s, i, j] : entries) {
    if (out[static_cast<std::size_t>(i)] >= 0 || col_used[static_cast<std::size_t>(j)]) continue;
    out[static_cast<std::size_t>(i)] = j;
    col_used[static_cast<std::size_t>(j)] = 1;
  }
  return out;
}

double assignment_total(const MatrixD& score, std::span<const int> assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= 0) total += score(static_cast<Eigen::Index>(i), assignment[i]);
  }
  return total;
}

MatrixD column_cosines(const MatrixF& dec_a, const MatrixF& dec_b) {
  if (dec_a.rows() != dec_b.rows()) {
    throw ConfigError("dictionary widths differ (" + std::to_string(dec_a.rows()) + " vs " +
                      std::to_string(dec_b.rows()) + ")");
  }
  MatrixD a = dec_a.cast<double>();
  MatrixD b = dec_b.cast<double>();
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double n = a.col(j).norm();
    if (n > 0.0) a.col(j) /= n;
  }
  for (Eigen::Index j = 0; j < b.cols(); ++j) {
    const double n = b.col(j).norm();
    if (n > 0.0) b.col(j) /= n;
  }
  return (a.transpose() * b).cwiseMax(-1.0).cwiseMin(1.0);
}

MatchResult match_features(const MatrixF& dec_a, const MatrixF& dec_b, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in (0, 1]");
  const MatrixD cos = column_cosines(dec_a, dec_b);
  MatchResult r;
  r.threshold = threshold;
  r.assignment = hungarian_maximize(cos);
  r.cosines.assign(r.assignment.size(), kNaN);
  int assigned = 0, matched = 0;
  double matched_cos = 0.0;
  for (std::size_t i = 0; i < r.assignment.size(); ++i) {
    if (r.assignment[i] < 0) continue;
    const double c = cos(static_cast<Eigen::Index>(i), r.assignment[i]);
    r.cosines[i] = c;
    ++assigned;
    if (c >= threshold) {
      ++matched;
      matched_cos += c;
    }
  }
  r.matched_fraction = assigned ? static_cast<double>(matched) / assigned : 0.0;
  r.mean_matched_cosine = matched ? matched_cos / matched : kNaN;
  return r;
}

CrossSeedReport cross_seed_report(std::span<const SaeModel> models, double threshold) {
  if (models.size() < 2) throw ConfigError("cross-seed report needs at least two models");
  for (const auto& m : models) {
    if (m.width() != models[0].width() || m.features() != models[0].features()) {
      throw ConfigError("cross-seed report needs identically shaped SAEs");
    }
  }
  CrossSeedReport rep;
  rep.threshold = threshold;
  std::vector<bool> stable(static_cast<std::size_t>(models[0].features()), true);
  for (std::size_t a = 0; a < models.size(); ++a) {
    for (std::size_t b = a + 1; b < models.size(); ++b) {
      const auto m = match_features(models[a].w_dec, models[b].w_dec, threshold);
      rep.pairs.push_back({static_cast<int>(a), static_cast<int>(b), m.matched_fraction, m.mean_matched_cosine});
      if (a == 0) {
        for (std::size_t i = 0; i < stable.size(); ++i) {
          if (!(m.cosines[i] >= threshold)) stable[i] = false;
        }
      }
    }
  }
  rep.pooled_fraction = static_cast<double>(std::count(stable.begin(), stable.end(), true)) /
                        static_cast<double>(stable.size());
  return rep;
}

void write_cross_seed_csv(const std::filesystem::path& path, const CrossSeedReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "row,seed_a,seed_b,matched_fraction,mean_matched_cosine,threshold\n";
  for (const auto& p : report.pairs) {
    out << "pair," << p.seed_a << ',' << p.seed_b << ',' << csv_num(p.matched_fraction) << ','
        << csv_num(p.mean_matched_cosine) << ',' << csv_num(report.threshold) << '\n';
  }
  out << "pooled,,," << csv_num(report.pooled_fraction) << ",," << csv_num(report.threshold) << '\n';
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::map<int, LayerActivations> extract_layers(const ModelWeights& weights,
                                               std::span<const std::vector<int>> sequences,
                                               const std::set<int>& layers) {
  std::map<int, LayerActivations> out;
  for (int l : layers) out[l].layer = l;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    auto fwd = forward_collect(weights, sequences[i], layers, std::nullopt, static_cast<std::uint32_t>(i));
    for (auto& b : fwd.batches) {
      auto& la = out[b.layer];
      la.patients.push_back(std::move(b.states));
      la.tokens.push_back(std::move(b.token_ids));
    }
  }
  return out;
}

std::vector<LayerSweepRow> layer_sweep(const ModelWeights& weights, const Cohort& cohort,
                                       const SaeConfig& sae_config, std::span<const int> layers,
                                       const SweepOptions& options,
                                       const std::function<void(int, const SaeModel&)>& sink) {
  std::vector<std::vector<int>> seqs;
  for (const auto& p : cohort.patients) {
    auto t = input_tokens(p, cohort.vocabulary);
    if (!t.empty()) seqs.push_back(std::move(t));
  }
  const std::set<int> layer_set(layers.begin(), layers.end());
  return layer_sweep(extract_layers(weights, seqs, layer_set), cohort.vocabulary, sae_config, options, sink);
}

std::vector<LayerSweepRow> layer_sweep(const std::map<int, LayerActivations>& acts, const Vocabulary& vocab,
                                       const SaeConfig& sae_config, const SweepOptions& options,
                                       const std::function<void(int, const SaeModel&)>& sink) {
  if (acts.empty()) throw ConfigError("layer sweep needs at least one layer");
  const std::size_t n_patients = acts.begin()->second.patients.size();
  for (const auto& [l, la] : acts) {
    if (la.patients.size() != n_patients || la.tokens.size() != n_patients) {
      throw ConfigError("layer sweep: patient counts differ across layers");
    }
  }
  if (n_patients < 2) throw ConfigError("layer sweep needs at least two patients");
  if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  const int width = static_cast<int>(acts.begin()->second.patients.front().cols());
  std::vector<std::size_t> order(n_patients);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(sae_config.seed, 0x73706c));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(n_patients))), 1,
      n_patients - 1);
  const std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::size_t> eval_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  struct Cell {
    LayerSweepRow row;
    std::optional<SaeModel> model;
  };
  std::vector<int> layer_list;
  for (const auto& [l, la] : acts) layer_list.push_back(l);
  auto results = run_jobs<Cell>(layer_list.size(), options.jobs, [&](std::size_t c) {
    const int layer = layer_list[c];
    const auto& la = acts.at(layer);
    std::vector<RowMatrixF> train_rows;
    for (auto i : train_idx) train_rows.push_back(la.patients[i]);
    PatientStream stream(std::move(train_rows), sae_config.batch_patients, sae_config.seed);
    SaeConfig cfg = sae_config;
    cfg.width = width;
    auto trained = train_sae(stream, cfg);
    Cell cell;
    cell.row.layer = layer;
    ExplainedVarianceAccumulator ev(cfg.width);
    ProfileAccumulator prof(trained.model.features());
    for (auto i : eval_idx) {
      const auto code = encode(trained.model, la.patients[i]);
      ev.add(la.patients[i], decode(trained.model, code));
      prof.add(code, la.tokens[i]);
    }
    cell.row.ev = ev.value();
    const auto profiles = prof.profiles(vocab, options.mass_floor);
    cell.row.complexity = complexity_summary(profiles);
    cell.model = std::move(trained.model);
    return cell;
  });

  std::vector<LayerSweepRow> rows;
  for (std::size_t c = 0; c < results.size(); ++c) {
    if (results[c].value) {
      rows.push_back(results[c].value->row);
      if (sink && results[c].value->model) sink(layer_list[c], *results[c].value->model);
    } else {
      LayerSweepRow failed;
      failed.layer = layer_list[c];
      failed.ev = kNaN;
      failed.complexity = {kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, 0};
      failed.error = fmt::format("layer {}: {}", layer_list[c], results[c].error);
      rows.push_back(failed);
    }
  }
  return rows;
}

void write_layer_sweep_csv(const std::filesystem::path& path, std::span<const LayerSweepRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "layer,ev,singleton_pct,mean_tokens,single_cat_pct,entropy_nats,coherent_pct,concentrated_pct\n";
  for (const auto& r : rows) {
    const auto& c = r.complexity;
    out << r.layer << ',' << csv_num(r.ev) << ',' << csv_num(c.singleton_pct) << ','
        << csv_num(c.mean_tokens_per_feature) << ',' << csv_num(c.single_category_pct) << ','
        << csv_num(c.mean_category_entropy) << ',' << csv_num(c.coherent_pct) << ','
        << csv_num(c.concentrated_pct) << '\n';
  }
}

std::vector<HyperparamRow> hyperparam_sweep(
    const std::function<std::unique_ptr<ActivationStream>()>& make_stream, const RowMatrixF& eval_rows,
    std::span<const HyperparamCell> grid, const SaeConfig& base,
    const std::function<double(const SaeModel&)>& probe_auc, int jobs) {
  if (grid.empty()) throw ConfigError("hyperparameter grid is empty");
  return run_jobs_or_throw<HyperparamRow>(grid.size(), jobs, [&](std::size_t c) {
    SaeConfig cfg = base;
    cfg.expansion = grid[c].expansion;
    cfg.k = grid[c].k;
    auto stream = make_stream();
    auto trained = train_sae(*stream, cfg);
    HyperparamRow row;
    row.expansion = cfg.expansion;
    row.k = cfg.k;
    row.features = cfg.features();
    row.ev = explained_variance(trained.model, eval_rows);
    row.probe_auc = probe_auc ? probe_auc(trained.model) : kNaN;
    return row;
  });
}

void write_hyperparam_csv(const std::filesystem::path& path, std::span<const HyperparamRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "expansion,k,features,ev,probe_auc\n";
  for (const auto& r : rows) {
    out << r.expansion << ',' << r.k << ',' << r.features << ',' << csv_num(r.ev) << ','
        << csv_num(r.probe_auc) << '\n';
  }
}

}  // namespace saelab
