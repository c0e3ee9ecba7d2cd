#include "saelab/pipeline.hpp"

#include "saelab/jobs.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace saelab {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum StageTag : std::uint64_t {
  kTagGen = 1,
  kTagModel,
  kTagSae,
  kTagSweep,
  kTagProbe,
  kTagKSens,
  kTagIntervene,
  kTagMatch,
  kTagHyper,
};

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

const std::string& lookup(const ConfigMap& m, const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

long long get_int(const ConfigMap& m, const std::string& key) {
  const auto& v = lookup(m, key);
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("config key '{}' expects an integer, got '{}'", key, v));
}

int get_int32(const ConfigMap& m, const std::string& key) { return static_cast<int>(get_int(m, key)); }

double get_double(const ConfigMap& m, const std::string& key) {
  const auto& v = lookup(m, key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("config key '{}' expects a number, got '{}'", key, v));
}

bool get_bool(const ConfigMap& m, const std::string& key) {
  const auto& v = lookup(m, key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(fmt::format("config key '{}' expects true or false, got '{}'", key, v));
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::vector<std::string> get_list(const ConfigMap& m, const std::string& key) {
  std::vector<std::string> out;
  std::stringstream ss(lookup(m, key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> get_int_list(const ConfigMap& m, const std::string& key) {
  std::vector<int> out;
  for (const auto& s : get_list(m, key)) {
    ConfigMap one{{key, s}};
    out.push_back(get_int32(one, key));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files and manifest
// ---------------------------------------------------------------------------

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw MissingPrerequisite(fmt::format("missing prerequisite '{}' (run `saelab {}` first)", path.string(), producer));
  }
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{:.6g}", v);
}

void write_manifest_entry(const RunConfig& cfg, const StageRecord& rec) {
  const fs::path path = cfg.out / paths::kManifest;
  json m = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      m = json::parse(in);
    } catch (const std::exception& e) {
      throw FormatError("corrupt manifest '" + path.string() + "': " + e.what());
    }
  }
  m["tool"] = "saelab";
  m["version"] = kToolVersion;
  json conf = json::object();
  for (const auto& [k, v] : cfg.snapshot) conf[k] = v;
  m["config"] = conf;
  json stage = json::object();
  stage["seed"] = rec.seed;
  stage["wall_seconds"] = rec.seconds;
  json inputs = json::object();
  for (const auto& p : rec.inputs) inputs[p] = sha256_file(cfg.out / p);
  json outputs = json::object();
  for (const auto& p : rec.outputs) outputs[p] = sha256_file(cfg.out / p);
  stage["inputs"] = inputs;
  stage["outputs"] = outputs;
  if (!m.contains("stages")) m["stages"] = json::object();
  m["stages"][rec.name] = stage;
  if (!m.contains("files")) m["files"] = json::object();
  for (const auto& [p, d] : outputs.items()) m["files"][p] = d;
  std::ofstream out(path, std::ios::trunc);
  out << m.dump(2) << '\n';
}

struct Inputs {
  Vocabulary vocab;
  Cohort cohort;
};

Inputs load_cohort(const RunConfig& cfg, StageRecord& rec) {
  require(cfg.out / paths::kVocab, "gen");
  require(cfg.out / paths::kCohort, "gen");
  rec.inputs.push_back(paths::kVocab);
  rec.inputs.push_back(paths::kCohort);
  Inputs in;
  in.vocab = read_vocabulary(cfg.out / paths::kVocab);
  in.cohort = read_cohort(cfg.out / paths::kCohort, in.vocab);
  return in;
}

ModelWeights load_weights(const RunConfig& cfg, StageRecord& rec) {
  require(cfg.out / paths::kModel, "gen");
  rec.inputs.push_back(paths::kModel);
  return load_model(cfg.out / paths::kModel);
}

struct LayerData {
  LayerActivations acts;
  std::vector<int> patient_ids;  // cohort index per entry
};

LayerData load_layer(const RunConfig& cfg, int layer, StageRecord& rec) {
  const auto rel = paths::activations(layer);
  require(cfg.out / rel, "extract");
  rec.inputs.push_back(rel);
  LayerData d;
  d.acts.layer = layer;
  for (auto& b : read_all_activations(cfg.out / rel)) {
    if (b.rows() == 0) continue;
    d.patient_ids.push_back(static_cast<int>(b.patient_ids.front()));
    d.acts.patients.push_back(std::move(b.states));
    d.acts.tokens.push_back(std::move(b.token_ids));
  }
  if (d.acts.patients.empty()) throw FormatError("activation file '" + rel + "' holds no rows");
  return d;
}

SaeModel load_analysis_sae(const RunConfig& cfg, StageRecord& rec, int width) {
  const auto rel = paths::sae_checkpoint(cfg.layer);
  require(cfg.out / rel, "train-sae");
  rec.inputs.push_back(rel);
  return load_sae(cfg.out / rel, width);
}

SaeConfig sae_config_for(const RunConfig& cfg, int width, std::uint64_t seed) {
  SaeConfig s = cfg.sae;
  s.width = width;
  s.seed = seed;
  return s;
}

void warn(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] warning: " << msg << '\n'; }

// Per-window patient matrices built from the full-sequence activation file.
// The model is causal, so a window's states are a prefix of the full rows.
struct WindowMatrices {
  std::vector<PatientRecord> records;
  std::vector<int> kept;
  std::vector<RowMatrixF> states;
};

WindowMatrices window_matrices(const Cohort& cohort, const LayerData& layer, const WindowSpec& window) {
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < layer.patient_ids.size(); ++i) row_of[layer.patient_ids[i]] = i;
  WindowMatrices w;
  for (const auto& p : cohort.patients) w.records.push_back(truncate_to_window(p, window));
  for (std::size_t i = 0; i < w.records.size(); ++i) {
    const auto m = static_cast<Eigen::Index>(input_tokens(w.records[i], cohort.vocabulary).size());
    if (m == 0) continue;
    const auto it = row_of.find(static_cast<int>(i));
    if (it == row_of.end()) throw FormatError(fmt::format("activation file lacks patient {}", i));
    const auto& full = layer.acts.patients[it->second];
    if (full.rows() < m) throw FormatError(fmt::format("activation rows for patient {} are short", i));
    w.states.push_back(full.topRows(m));
    w.kept.push_back(static_cast<int>(i));
  }
  return w;
}

PatientFeatureMatrix representation_matrix(Representation rep, const WindowMatrices& w, const Vocabulary& vocab,
                                           const SaeModel& sae) {
  switch (rep) {
    case Representation::sae: return pool_from_states(rep, w.states, w.kept, w.records, &sae);
    case Representation::dense: return pool_from_states(rep, w.states, w.kept, w.records);
    default: break;
  }
  auto b = baselines(w.records, vocab, true);
  if (rep == Representation::bot) return b.bot;
  if (rep == Representation::presence) return b.presence;
  return b.seqlen;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_gen(const RunConfig& cfg, StageRecord& rec) {
  fs::create_directories(cfg.out);
  rec.seed = derive_seed(cfg.seed, kTagGen);
  const auto cohort = generate_cohort(cfg.datagen, rec.seed);
  write_vocabulary(cfg.out / paths::kVocab, cohort.vocabulary);
  write_cohort(cfg.out / paths::kCohort, cohort);
  ModelConfig mc = cfg.model;
  mc.vocab_size = cohort.vocabulary.size();
  mc.seed = derive_seed(cfg.seed, kTagModel);
  auto weights = init_toy_model(mc);
  if (cohort.planted && cfg.plant_strength > 0.0) {
    plant_embedding_association(weights, cohort.planted->treatment_token, cohort.planted->outcome_token_high,
                                cfg.plant_strength);
  }
  save_model(cfg.out / paths::kModel, weights);
  rec.outputs = {paths::kVocab, paths::kCohort, paths::kModel};
}

void stage_extract(const RunConfig& cfg, StageRecord& rec) {
  const auto in = load_cohort(cfg, rec);
  const auto weights = load_weights(cfg, rec);
  auto layers_v = cfg.sweep_layers();
  std::set<int> layers(layers_v.begin(), layers_v.end());
  layers.insert(cfg.layer);
  for (int l : layers) {
    if (l < 0 || l >= weights.config.extraction_points()) {
      throw ConfigError(fmt::format("layer {} outside extraction points 0..{}", l, weights.config.extraction_points() - 1));
    }
  }
  fs::create_directories(cfg.out / "activations");
  std::map<int, std::unique_ptr<ActivationWriter>> writers;
  for (int l : layers) {
    writers[l] = std::make_unique<ActivationWriter>(cfg.out / paths::activations(l), weights.config.width, l);
  }
  for (std::size_t i = 0; i < in.cohort.patients.size(); ++i) {
    const auto tokens = input_tokens(in.cohort.patients[i], in.vocab);
    if (tokens.empty()) continue;
    const auto fwd = forward_collect(weights, tokens, layers, std::nullopt, static_cast<std::uint32_t>(i));
    for (const auto& b : fwd.batches) writers.at(b.layer)->write(b);
  }
  for (auto& [l, w] : writers) {
    w->close();
    rec.outputs.push_back(paths::activations(l));
  }
}

void stage_train_sae(const RunConfig& cfg, StageRecord& rec) {
  const auto layer = load_layer(cfg, cfg.layer, rec);
  rec.seed = derive_seed(cfg.seed, kTagSae);
  const auto sc = sae_config_for(cfg, static_cast<int>(layer.acts.patients.front().cols()), rec.seed);
  PatientStream stream(layer.acts.patients, sc.batch_patients, sc.seed);
  const auto trained = train_sae(stream, sc);
  for (const auto& w : trained.log.warnings) warn("train-sae", w);
  const auto ckpt = paths::sae_checkpoint(cfg.layer);
  fs::create_directories((cfg.out / ckpt).parent_path());
  save_sae(cfg.out / ckpt, trained.model);
  const std::string log = fmt::format("sae/train_log_layer{}.csv", cfg.layer);
  write_train_log_csv(cfg.out / log, trained.log);
  rec.outputs = {ckpt, log};
}

void stage_sweep(const RunConfig& cfg, StageRecord& rec) {
  const auto in = load_cohort(cfg, rec);
  rec.seed = derive_seed(cfg.seed, kTagSweep);
  std::map<int, LayerActivations> acts;
  std::vector<int> ids;
  for (int l : cfg.sweep_layers()) {
    auto d = load_layer(cfg, l, rec);
    if (!ids.empty() && d.patient_ids != ids) throw FormatError("activation files disagree on patients");
    ids = d.patient_ids;
    acts[l] = std::move(d.acts);
  }
  const int width = static_cast<int>(acts.begin()->second.patients.front().cols());
  auto options = cfg.sweep.options;
  options.jobs = cfg.jobs;
  fs::create_directories(cfg.out / "sweep");
  const auto rows = layer_sweep(acts, in.vocab, sae_config_for(cfg, width, rec.seed), options,
                                [&](int l, const SaeModel& m) {
                                  const auto rel = fmt::format("sweep/layer{}.ckpt", l);
                                  save_sae(cfg.out / rel, m);
                                  rec.outputs.push_back(rel);
                                });
  for (const auto& r : rows) {
    if (!r.error.empty()) warn("sweep", r.error);
  }
  write_layer_sweep_csv(cfg.out / "layer_sweep.csv", rows);
  {
    auto out = open_out(cfg.out / "plots/u_curve.csv");
    out << "layer,ev\n";
    for (const auto& r : rows) out << r.layer << ',' << num(r.ev) << '\n';
  }
  {
    auto out = open_out(cfg.out / "plots/concept_emergence.csv");
    out << "layer,metric,value\n";
    for (const auto& r : rows) {
      const auto& c = r.complexity;
      for (const auto& [name, v] : std::vector<std::pair<const char*, double>>{
               {"singleton_pct", c.singleton_pct},
               {"mean_tokens", c.mean_tokens_per_feature},
               {"single_cat_pct", c.single_category_pct},
               {"entropy_nats", c.mean_category_entropy},
               {"coherent_pct", c.coherent_pct},
               {"concentrated_pct", c.concentrated_pct}}) {
        out << r.layer << ',' << name << ',' << num(v) << '\n';
      }
    }
  }
  rec.outputs.insert(rec.outputs.end(), {"layer_sweep.csv", "plots/u_curve.csv", "plots/concept_emergence.csv"});

  // Hyperparameter grid at the analysis layer: EV on held-out patients and
  // full-sequence mortality AUC of the pooled features.
  const auto layer = load_layer(cfg, cfg.layer, rec);
  std::vector<std::size_t> order(layer.acts.patients.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, kTagHyper));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(options.train_fraction * static_cast<double>(order.size())));
  std::vector<RowMatrixF> train_rows;
  Eigen::Index eval_n = 0;
  for (std::size_t i = n_train; i < order.size(); ++i) eval_n += layer.acts.patients[order[i]].rows();
  RowMatrixF eval(eval_n, width);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& m = layer.acts.patients[order[i]];
    if (i < n_train) {
      train_rows.push_back(m);
    } else {
      eval.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
  }
  std::vector<HyperparamCell> grid;
  for (int e : cfg.sweep.expansions) {
    for (int k : cfg.sweep.k_values) grid.push_back({e, k});
  }
  const auto window = window_matrices(in.cohort, layer, WindowSpec::full());
  ProbeConfig quick = cfg.probes.probe;
  quick.bootstrap = 1;
  const auto probe_seed = derive_seed(cfg.seed, kTagProbe);
  const auto hyper = hyperparam_sweep(
      [&] { return std::make_unique<PatientStream>(train_rows, cfg.sae.batch_patients, rec.seed); }, eval, grid,
      sae_config_for(cfg, width, rec.seed),
      [&](const SaeModel& m) {
        return logistic_probe(representation_matrix(Representation::sae, window, in.vocab, m), probe_seed, quick).auc;
      },
      cfg.jobs);
  write_hyperparam_csv(cfg.out / "hyperparam.csv", hyper);
  rec.outputs.push_back("hyperparam.csv");
}

void stage_profile(const RunConfig& cfg, StageRecord& rec) {
  require(cfg.out / paths::kVocab, "gen");
  rec.inputs.push_back(paths::kVocab);
  const auto vocab = read_vocabulary(cfg.out / paths::kVocab);
  const auto layer = load_layer(cfg, cfg.layer, rec);
  const auto sae = load_analysis_sae(cfg, rec, static_cast<int>(layer.acts.patients.front().cols()));
  ProfileAccumulator acc(sae.features());
  for (std::size_t i = 0; i < layer.acts.patients.size(); ++i) {
    acc.add(encode(sae, layer.acts.patients[i]), layer.acts.tokens[i]);
  }
  const auto profiles = acc.profiles(vocab, cfg.sweep.options.mass_floor);
  {
    auto out = open_out(cfg.out / "profiles.json");
    out << profiles_to_json(profiles, vocab, 50) << '\n';
  }
  const auto c = complexity_summary(profiles);
  {
    auto out = open_out(cfg.out / "complexity.csv");
    out << "layer,singleton_pct,mean_tokens,single_cat_pct,entropy_nats,coherent_pct,concentrated_pct,n_active\n";
    out << cfg.layer << ',' << num(c.singleton_pct) << ',' << num(c.mean_tokens_per_feature) << ','
        << num(c.single_category_pct) << ',' << num(c.mean_category_entropy) << ',' << num(c.coherent_pct) << ','
        << num(c.concentrated_pct) << ',' << c.n_features_active << '\n';
  }
  rec.outputs = {"profiles.json", "complexity.csv"};
}

void stage_probe(const RunConfig& cfg, StageRecord& rec) {
  const auto in = load_cohort(cfg, rec);
  const auto weights = load_weights(cfg, rec);
  const auto layer = load_layer(cfg, cfg.layer, rec);
  const auto sae = load_analysis_sae(cfg, rec, weights.config.width);
  rec.seed = derive_seed(cfg.seed, kTagProbe);
  const auto& pc = cfg.probes.probe;

  struct Job {
    Representation rep;
    std::size_t window;
  };
  std::vector<WindowMatrices> windows;
  for (const auto& w : cfg.probes.windows) windows.push_back(window_matrices(in.cohort, layer, w));
  std::vector<Job> jobs;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    for (auto rep : cfg.probes.representations) jobs.push_back({rep, w});
  }
  struct Out {
    ProbeResult auc;
    RidgeResult r2;
  };
  const auto results = run_jobs_or_throw<Out>(jobs.size(), cfg.jobs, [&](std::size_t j) {
    const auto m = representation_matrix(jobs[j].rep, windows[jobs[j].window], in.vocab, sae);
    return Out{logistic_probe(m, rec.seed, pc), ridge_probe(m, rec.seed, pc)};
  });
  std::vector<ResultRow> rows;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto label = cfg.probes.windows[jobs[j].window].label();
    const auto& a = results[j].auc;
    rows.push_back({to_string(jobs[j].rep), label, "auc_mortality", a.auc, a.ci_low, a.ci_high, a.n_events, a.underpowered});
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto label = cfg.probes.windows[jobs[j].window].label();
    const auto& r = results[j].r2;
    rows.push_back({to_string(jobs[j].rep), label, "r2_log_los", r.r2, r.ci_low, r.ci_high, 0, false});
  }
  write_results_csv(cfg.out / "probe_results.csv", rows);
  {
    auto out = open_out(cfg.out / "plots/windows.csv");
    out << "representation,window,auc,ci_low,ci_high\n";
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      const auto& a = results[j].auc;
      out << to_string(jobs[j].rep) << ',' << cfg.probes.windows[jobs[j].window].label() << ',' << num(a.auc) << ','
          << num(a.ci_low) << ',' << num(a.ci_high) << '\n';
    }
  }
  for (const auto& w : windows) {
    const int excluded = static_cast<int>(w.records.size() - w.kept.size());
    if (excluded > 0) warn("probe", fmt::format("{} patient(s) with empty windows excluded", excluded));
  }

  const auto ks = k_sensitivity(weights, in.cohort.patients, in.vocab, cfg.layer, cfg.probes.k_values,
                                sae_config_for(cfg, weights.config.width, derive_seed(cfg.seed, kTagKSens)), rec.seed,
                                pc, cfg.jobs);
  write_k_sensitivity_csv(cfg.out / "k_sensitivity.csv", ks);
  fs::create_directories(cfg.out / "plots");
  write_k_sensitivity_csv(cfg.out / "plots/k_sensitivity.csv", ks);

  const auto full = window_matrices(in.cohort, layer, WindowSpec::full());
  const auto m = representation_matrix(Representation::sae, full, in.vocab, sae);
  std::vector<std::string> groups;
  for (int id : m.patient_ids) {
    const auto& demo = in.cohort.patients[static_cast<std::size_t>(id)].demographics;
    const auto it = demo.find("group");
    groups.push_back(it == demo.end() ? "unknown" : it->second);
  }
  const auto strata = group_stratified_probe(m, groups, rec.seed, pc);
  {
    auto out = open_out(cfg.out / "demographic_strata.csv");
    out << "group,auc,ci_low,ci_high,n_test,n_events,underpowered,note\n";
    for (const auto& g : strata) {
      out << g.group << ',' << num(g.auc) << ',' << num(g.ci_low) << ',' << num(g.ci_high) << ',' << g.n_test << ','
          << g.n_events << ',' << (g.underpowered ? 1 : 0) << ',' << g.note << '\n';
    }
  }
  rec.outputs = {"probe_results.csv", "plots/windows.csv", "k_sensitivity.csv", "plots/k_sensitivity.csv",
                 "demographic_strata.csv"};
}

void stage_cox(const RunConfig& cfg, StageRecord& rec) {
  const auto in = load_cohort(cfg, rec);
  const auto layer = load_layer(cfg, cfg.layer, rec);
  const auto sae = load_analysis_sae(cfg, rec, static_cast<int>(layer.acts.patients.front().cols()));
  const auto full = window_matrices(in.cohort, layer, WindowSpec::full());
  const auto m = representation_matrix(Representation::sae, full, in.vocab, sae);
  constexpr double kAlpha = 0.05;
  const auto screen = cox_screen(m.rows, m.time_to_event, m.died, kAlpha);
  write_cox_csv(cfg.out / "cox_screen.csv", screen);
  const auto& top = screen.front();
  std::vector<double> score(static_cast<std::size_t>(m.n()));
  for (Eigen::Index i = 0; i < m.n(); ++i) score[static_cast<std::size_t>(i)] = m.rows(i, top.feature_id) * (top.beta >= 0 ? 1.0 : -1.0);
  const double c_index = harrell_c(score, m.time_to_event, m.died);
  const auto n_sig = std::count_if(screen.begin(), screen.end(), [](const auto& r) { return r.significant_bonferroni; });
  {
    auto out = open_out(cfg.out / "cox_summary.csv");
    out << "n_features,bonferroni_threshold,n_significant,top_feature,top_beta,top_p,top_c_index\n";
    out << m.rows.cols() << ',' << num(kAlpha / static_cast<double>(m.rows.cols())) << ',' << n_sig << ','
        << top.feature_id << ',' << num(top.beta) << ',' << num(top.p_value) << ',' << num(c_index) << '\n';
  }
  rec.outputs = {"cox_screen.csv", "cox_summary.csv"};
}

void stage_intervene(const RunConfig& cfg, StageRecord& rec) {
  const auto in = load_cohort(cfg, rec);
  const auto weights = load_weights(cfg, rec);
  const auto layer = load_layer(cfg, cfg.layer, rec);
  const auto sae = load_analysis_sae(cfg, rec, weights.config.width);
  if (!in.cohort.planted) throw ConfigError("interventions need a cohort with a planted association");
  const auto& assoc = *in.cohort.planted;
  rec.seed = derive_seed(cfg.seed, kTagIntervene);
  const auto& is = cfg.interventions;

  ProfileAccumulator acc(sae.features());
  Eigen::Index total_rows = 0;
  for (std::size_t i = 0; i < layer.acts.patients.size(); ++i) {
    acc.add(encode(sae, layer.acts.patients[i]), layer.acts.tokens[i]);
    total_rows += layer.acts.patients[i].rows();
  }
  const auto profiles = acc.profiles(in.vocab, cfg.sweep.options.mass_floor);
  const auto targets = features_with_top_token(profiles, assoc.outcome_token_high);
  if (targets.empty()) {
    throw Error("no SAE feature has '" + in.vocab.token(assoc.outcome_token_high) + "' as its top token");
  }
  std::optional<VectorF> scales;
  if (is.scaled) {
    RowMatrixF sample(total_rows, weights.config.width);
    Eigen::Index at = 0;
    for (const auto& p : layer.acts.patients) {
      sample.middleRows(at, p.rows()) = p;
      at += p.rows();
    }
    scales = calibrate_scales(sae, sample);
  }

  std::vector<std::vector<int>> seqs;
  for (const auto& p : in.cohort.patients) {
    if (static_cast<int>(seqs.size()) >= is.noise_patients) break;
    auto t = input_tokens(p, in.vocab);
    if (!t.empty()) seqs.push_back(std::move(t));
  }
  const auto nf_delta = noise_floor(weights, seqs, sae, cfg.layer, InterventionMode::delta);
  const auto nf_recon = noise_floor(weights, seqs, sae, cfg.layer, InterventionMode::reconstruct);
  {
    auto out = open_out(cfg.out / "noise_floor.csv");
    out << "mode,positions,max_abs_logit_dev,mean_abs_logit_dev,max_odds_ratio_dev,mean_odds_ratio_dev,bit_identical\n";
    for (const auto* nf : {&nf_delta, &nf_recon}) {
      out << to_string(nf->mode) << ',' << nf->positions << ',' << num(nf->max_abs_logit_dev) << ','
          << num(nf->mean_abs_logit_dev) << ',' << num(nf->max_odds_ratio_dev) << ',' << num(nf->mean_odds_ratio_dev)
          << ',' << (nf->bit_identical ? 1 : 0) << '\n';
    }
    out << "ratio,,,,," << num(noise_floor_ratio(nf_recon, nf_delta)) << ",\n";
  }

  std::vector<std::string> warnings;
  const auto spec = make_spec(cfg.layer, is.mode, sae.features(), targets, is.alpha, scales, &warnings);
  for (const auto& w : warnings) warn("intervene", w);
  DiDConfig dc = is.did;
  dc.seed = rec.seed;
  dc.jobs = cfg.jobs;
  const auto ens = control_comparison(weights, in.cohort, assoc, sae, spec, is.control_sets, dc);
  const std::vector<InterventionRow> rows{{"ablate_outcome_features", is.mode, ens}};
  write_intervention_csv(cfg.out / "interventions.csv", rows);
  {
    auto out = open_out(cfg.out / "intervention_manifest.json");
    out << intervention_manifest_json(spec, dc, assoc, in.vocab, ens) << '\n';
  }
  rec.outputs = {"noise_floor.csv", "interventions.csv", "intervention_manifest.json"};
}

void stage_match(const RunConfig& cfg, StageRecord& rec) {
  const auto layer = load_layer(cfg, cfg.layer, rec);
  const int width = static_cast<int>(layer.acts.patients.front().cols());
  const int n = cfg.stability.n_seeds;
  if (n < 2) throw ConfigError("stability.seeds must be at least 2");
  rec.seed = derive_seed(cfg.seed, kTagMatch);
  const auto models = run_jobs_or_throw<SaeModel>(static_cast<std::size_t>(n), cfg.jobs, [&](std::size_t i) {
    const auto sc = sae_config_for(cfg, width, derive_seed(rec.seed, static_cast<std::uint64_t>(i)));
    PatientStream stream(layer.acts.patients, sc.batch_patients, sc.seed);
    return train_sae(stream, sc).model;
  });
  fs::create_directories(cfg.out / "stability");
  for (int i = 0; i < n; ++i) {
    const auto rel = fmt::format("stability/seed{}.ckpt", i);
    save_sae(cfg.out / rel, models[static_cast<std::size_t>(i)]);
    rec.outputs.push_back(rel);
  }
  const auto report = cross_seed_report(models, cfg.stability.threshold);
  write_cross_seed_csv(cfg.out / "cross_seed.csv", report);
  rec.outputs.push_back("cross_seed.csv");
}

void stage_report(const RunConfig& cfg, StageRecord& rec) {
  const fs::path manifest = cfg.out / paths::kManifest;
  require(manifest, "all");
  const auto bad = verify_manifest(cfg.out);
  std::ifstream in(manifest);
  const json m = json::parse(in);
  auto out = open_out(cfg.out / "report.md");
  out << "# saelab run report\n\n";
  out << "Seed: " << cfg.seed << "  \nTool version: " << kToolVersion << "\n\n";
  out << "## Stages\n\n| stage | seed | seconds | outputs |\n|---|---|---|---|\n";
  for (const auto& name : stage_names()) {
    if (!m["stages"].contains(name)) continue;
    const auto& s = m["stages"][name];
    out << "| " << name << " | " << s["seed"].get<std::uint64_t>() << " | "
        << fmt::format("{:.2f}", s["wall_seconds"].get<double>()) << " | " << s["outputs"].size() << " |\n";
  }
  out << "\n## Digest check\n\n";
  if (bad.empty()) {
    out << "All recorded digests match.\n";
  } else {
    for (const auto& p : bad) out << "- mismatch: " << p << '\n';
  }
  for (const char* table : {"layer_sweep.csv", "probe_results.csv", "k_sensitivity.csv", "cox_summary.csv",
                            "noise_floor.csv", "interventions.csv", "cross_seed.csv"}) {
    const fs::path p = cfg.out / table;
    if (!fs::exists(p)) continue;
    std::ifstream t(p);
    out << "\n## " << table << "\n\n```\n" << t.rdbuf() << "```\n";
  }
  rec.outputs = {"report.md"};
  if (!bad.empty()) throw Error(fmt::format("{} manifest digest(s) do not match", bad.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Public interface
// ---------------------------------------------------------------------------

ConfigMap default_config_map() {
  return {
      {"run.seed", "0"},
      {"run.out", "run"},
      {"run.jobs", "1"},
      {"run.layer", "2"},
      {"datagen.n_patients", "1000"},
      {"datagen.min_events", "16"},
      {"datagen.max_events", "40"},
      {"datagen.mortality_rate", "0.053"},
      {"datagen.setting", "icu"},
      {"datagen.end_markers", "true"},
      {"datagen.marker_probability", "0.9"},
      {"datagen.treatment_rate", "0.05"},
      {"datagen.length_severity_corr", "0.7"},
      {"datagen.gap_severity_gain", "0.0"},
      {"datagen.planted", "true"},
      {"datagen.treatment", "MED:WARFARIN"},
      {"datagen.outcome", "LAB:INR:Q5"},
      {"datagen.effect_size", "1.0"},
      {"model.width", "32"},
      {"model.n_layers", "4"},
      {"model.n_heads", "4"},
      {"model.ffn_mult", "4"},
      {"model.init_scale", "0.5"},
      {"model.plant_strength", "0.7"},
      {"sae.expansion", "8"},
      {"sae.k", "16"},
      {"sae.lr", "0.001"},
      {"sae.steps", "1500"},
      {"sae.batch_patients", "16"},
      {"sae.dead_window", "1000"},
      {"sae.resample_every", "500"},
      {"sweep.layers", "all"},
      {"sweep.train_fraction", "0.8"},
      {"sweep.mass_floor", "0.01"},
      {"sweep.expansions", "4,8"},
      {"sweep.k_values", "8,16"},
      {"probes.windows", "48h,full"},
      {"probes.representations", "sae,dense,bot,presence,seqlen"},
      {"probes.k_values", "8,16,32"},
      {"probes.bootstrap", "500"},
      {"probes.test_fraction", "0.2"},
      {"probes.folds", "5"},
      {"probes.min_test_events", "10"},
      {"interventions.mode", "delta"},
      {"interventions.alpha", "1.0"},
      {"interventions.scaled", "false"},
      {"interventions.control_sets", "10"},
      {"interventions.patients", "40"},
      {"interventions.samples", "30"},
      {"interventions.steps", "4"},
      {"interventions.prefix_tokens", "16"},
      {"interventions.temperature", "1.0"},
      {"interventions.noise_patients", "30"},
      {"stability.seeds", "3"},
      {"stability.threshold", "0.7"},
  };
}

void overlay_config_file(ConfigMap& base, const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' not found");
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  for (const auto& [section, child] : tree) {
    if (child.empty()) throw ConfigError("config key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : child) {
      overlay_assignment(base, section + "." + key + "=" + value.get_value<std::string>());
    }
  }
}

void overlay_assignment(ConfigMap& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + assignment + "'");
  const auto key = trim(assignment.substr(0, eq));
  const auto it = base.find(key);
  if (it == base.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = trim(assignment.substr(eq + 1));
}

std::vector<int> RunConfig::sweep_layers() const {
  if (!sweep.layers.empty()) return sweep.layers;
  std::vector<int> all(static_cast<std::size_t>(model.extraction_points()));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

RunConfig resolve_config(const ConfigMap& m) {
  RunConfig c;
  c.snapshot = m;
  c.seed = static_cast<std::uint64_t>(get_int(m, "run.seed"));
  c.out = lookup(m, "run.out");
  c.jobs = get_int32(m, "run.jobs");
  if (c.jobs < 1) throw ConfigError("run.jobs must be at least 1");
  c.layer = get_int32(m, "run.layer");

  auto& d = c.datagen;
  d.n_patients = get_int32(m, "datagen.n_patients");
  d.min_events = get_int32(m, "datagen.min_events");
  d.max_events = get_int32(m, "datagen.max_events");
  d.mortality_rate = get_double(m, "datagen.mortality_rate");
  const auto setting = lookup(m, "datagen.setting");
  if (setting == "icu") {
    d.setting = Setting::icu;
  } else if (setting == "outpatient") {
    d.setting = Setting::outpatient;
  } else {
    throw ConfigError("datagen.setting must be icu or outpatient");
  }
  d.end_of_stay_markers = get_bool(m, "datagen.end_markers");
  d.vocab = desk_vocab_config(d.end_of_stay_markers);
  d.marker_probability = get_double(m, "datagen.marker_probability");
  d.treatment_rate = get_double(m, "datagen.treatment_rate");
  d.length_severity_corr = get_double(m, "datagen.length_severity_corr");
  d.los_severity_gain = get_double(m, "datagen.gap_severity_gain");
  if (get_bool(m, "datagen.planted")) {
    d.planted = PlantedAssociationSpec{lookup(m, "datagen.treatment"), lookup(m, "datagen.outcome"),
                                       get_double(m, "datagen.effect_size")};
  }

  c.model.width = get_int32(m, "model.width");
  c.model.n_layers = get_int32(m, "model.n_layers");
  c.model.n_heads = get_int32(m, "model.n_heads");
  c.model.ffn_mult = get_int32(m, "model.ffn_mult");
  c.model.init_scale = get_double(m, "model.init_scale");
  c.model.vocab_size = 1;
  c.model.validate();
  c.plant_strength = get_double(m, "model.plant_strength");
  if (c.layer < 0 || c.layer >= c.model.extraction_points()) {
    throw ConfigError(fmt::format("run.layer must lie in 0..{}", c.model.extraction_points() - 1));
  }

  c.sae.width = c.model.width;
  c.sae.expansion = get_int32(m, "sae.expansion");
  c.sae.k = get_int32(m, "sae.k");
  c.sae.lr = get_double(m, "sae.lr");
  c.sae.steps = get_int32(m, "sae.steps");
  c.sae.batch_patients = get_int32(m, "sae.batch_patients");
  c.sae.dead_window = get_int32(m, "sae.dead_window");
  c.sae.resample_check_every = get_int32(m, "sae.resample_every");
  c.sae.validate();

  if (lookup(m, "sweep.layers") != "all") c.sweep.layers = get_int_list(m, "sweep.layers");
  for (int l : c.sweep.layers) {
    if (l < 0 || l >= c.model.extraction_points()) throw ConfigError(fmt::format("sweep layer {} out of range", l));
  }
  c.sweep.options.train_fraction = get_double(m, "sweep.train_fraction");
  c.sweep.options.mass_floor = get_double(m, "sweep.mass_floor");
  c.sweep.expansions = get_int_list(m, "sweep.expansions");
  c.sweep.k_values = get_int_list(m, "sweep.k_values");

  for (const auto& w : get_list(m, "probes.windows")) c.probes.windows.push_back(WindowSpec::parse(w));
  for (const auto& r : get_list(m, "probes.representations")) c.probes.representations.push_back(parse_representation(r));
  if (c.probes.windows.empty() || c.probes.representations.empty()) {
    throw ConfigError("probes need at least one window and one representation");
  }
  c.probes.k_values = get_int_list(m, "probes.k_values");
  c.probes.probe.bootstrap = get_int32(m, "probes.bootstrap");
  c.probes.probe.test_fraction = get_double(m, "probes.test_fraction");
  c.probes.probe.folds = get_int32(m, "probes.folds");
  c.probes.probe.min_test_events = get_int32(m, "probes.min_test_events");

  auto& iv = c.interventions;
  iv.mode = parse_intervention_mode(lookup(m, "interventions.mode"));
  iv.alpha = get_double(m, "interventions.alpha");
  if (iv.alpha < 0.0) throw ConfigError("interventions.alpha must be non-negative");
  iv.scaled = get_bool(m, "interventions.scaled");
  iv.control_sets = get_int32(m, "interventions.control_sets");
  iv.noise_patients = get_int32(m, "interventions.noise_patients");
  iv.did.n_patients = get_int32(m, "interventions.patients");
  iv.did.n_samples = get_int32(m, "interventions.samples");
  iv.did.n_steps = get_int32(m, "interventions.steps");
  iv.did.prefix_tokens = get_int32(m, "interventions.prefix_tokens");
  iv.did.temperature = get_double(m, "interventions.temperature");
  iv.did.validate();

  c.stability.n_seeds = get_int32(m, "stability.seeds");
  c.stability.threshold = get_double(m, "stability.threshold");
  return c;
}

namespace paths {
std::string activations(int layer) { return fmt::format("activations/layer{}.act", layer); }
std::string sae_checkpoint(int layer) { return fmt::format("sae/layer{}.ckpt", layer); }
}  // namespace paths

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read '" + path.string() + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen",  "extract", "train-sae", "sweep", "profile",
                                              "probe", "cox",     "intervene", "match", "report"};
  return names;
}

StageRecord run_stage(const std::string& name, const RunConfig& config) {
  StageRecord rec;
  rec.name = name;
  rec.seed = config.seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (name == "gen") {
    stage_gen(config, rec);
  } else if (name == "extract") {
    stage_extract(config, rec);
  } else if (name == "train-sae") {
    stage_train_sae(config, rec);
  } else if (name == "sweep") {
    stage_sweep(config, rec);
  } else if (name == "profile") {
    stage_profile(config, rec);
  } else if (name == "probe") {
    stage_probe(config, rec);
  } else if (name == "cox") {
    stage_cox(config, rec);
  } else if (name == "intervene") {
    stage_intervene(config, rec);
  } else if (name == "match") {
    stage_match(config, rec);
  } else if (name == "report") {
    stage_report(config, rec);
  } else {
    throw ConfigError("unknown stage '" + name + "'");
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::sort(rec.inputs.begin(), rec.inputs.end());
  rec.inputs.erase(std::unique(rec.inputs.begin(), rec.inputs.end()), rec.inputs.end());
  write_manifest_entry(config, rec);
  return rec;
}

std::vector<StageRecord> run_all(const RunConfig& config) {
  std::vector<StageRecord> out;
  for (const auto& name : stage_names()) out.push_back(run_stage(name, config));
  return out;
}

std::vector<std::string> verify_manifest(const fs::path& run_dir) {
  const fs::path path = run_dir / paths::kManifest;
  require(path, "all");
  std::ifstream in(path);
  json m;
  try {
    m = json::parse(in);
  } catch (const std::exception& e) {
    throw FormatError("corrupt manifest '" + path.string() + "': " + e.what());
  }
  std::vector<std::string> bad;
  if (!m.contains("files")) return bad;
  for (const auto& [rel, digest] : m["files"].items()) {
    if (rel == "report.md") continue;
    const fs::path p = run_dir / rel;
    if (!fs::exists(p) || sha256_file(p) != digest.get<std::string>()) bad.push_back(rel);
  }
  return bad;
}

}  // namespace saelab
