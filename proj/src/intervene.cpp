#include "saelab/intervene.hpp"

#include "saelab/jobs.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>

namespace saelab {
namespace {

void check_width(Eigen::Index cols, const SaeModel& sae, const VectorF& mask) {
  if (cols != sae.width()) {
    throw ConfigError(fmt::format("hidden width {} does not match SAE width {}", cols, sae.width()));
  }
  if (mask.size() != sae.features()) {
    throw ConfigError(fmt::format("mask has {} entries, SAE has {} features", mask.size(), sae.features()));
  }
}

std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{:.6g}", v);
}

}  // namespace

std::string to_string(InterventionMode mode) { return mode == InterventionMode::delta ? "delta" : "reconstruct"; }

InterventionMode parse_intervention_mode(const std::string& text) {
  if (text == "delta") return InterventionMode::delta;
  if (text == "reconstruct") return InterventionMode::reconstruct;
  throw ConfigError("unknown intervention mode '" + text + "' (use delta or reconstruct)");
}

void InterventionSpec::validate(int n_features) const {
  if (mask.size() != n_features) throw ConfigError("intervention mask size does not match SAE features");
  if (!((mask.array() >= 0.0f).all() && (mask.array() <= 1.0f).all())) {
    throw ConfigError("intervention mask entries must lie in [0, 1]");
  }
  if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
  for (int t : target_features) {
    if (t < 0 || t >= n_features) throw ConfigError(fmt::format("target feature {} out of range", t));
  }
}

void apply_delta_rows(Eigen::Ref<RowMatrixF> h, const SaeModel& sae, const VectorF& mask) {
  check_width(h.cols(), sae, mask);
  const RowMatrixF copy = h;
  const auto code = encode(sae, copy);
  Eigen::VectorXf diff(sae.width());
  for (Eigen::Index r = 0; r < code.rows(); ++r) {
    const auto idx = code.row_indices(r);
    const auto val = code.row_values(r);
    bool touched = false;
    diff.setZero();
    for (int s = 0; s < code.k; ++s) {
      const int j = idx[static_cast<std::size_t>(s)];
      const float v = val[static_cast<std::size_t>(s)];
      const float scaled = v * mask(j);
      if (scaled == v) continue;
      diff.noalias() += (scaled - v) * sae.w_dec.col(j);
      touched = true;
    }
    if (touched) h.row(r) += diff.transpose();
  }
}

Eigen::RowVectorXf apply_delta(const Eigen::RowVectorXf& h, const SaeModel& sae, const VectorF& mask) {
  RowMatrixF m = h;
  apply_delta_rows(m, sae, mask);
  return m.row(0);
}

void apply_reconstruct_rows(Eigen::Ref<RowMatrixF> h, const SaeModel& sae, const VectorF& mask) {
  check_width(h.cols(), sae, mask);
  const RowMatrixF copy = h;
  auto code = encode(sae, copy);
  for (std::size_t i = 0; i < code.indices.size(); ++i) code.values[i] *= mask(code.indices[i]);
  h = decode(sae, code);
}

Eigen::RowVectorXf apply_reconstruct(const Eigen::RowVectorXf& h, const SaeModel& sae, const VectorF& mask) {
  RowMatrixF m = h;
  apply_reconstruct_rows(m, sae, mask);
  return m.row(0);
}

VectorF attenuation_mask(int n_features, const std::set<int>& targets, double alpha,
                         const std::optional<VectorF>& scales, std::vector<std::string>* warnings) {
  if (n_features <= 0) throw ConfigError("mask needs at least one feature");
  if (alpha < 0.0 || !std::isfinite(alpha)) throw ConfigError("alpha must be non-negative");
  if (scales && scales->size() != n_features) throw ConfigError("scale vector size does not match features");
  VectorF mask = VectorF::Ones(n_features);
  int clamped = 0;
  for (int t : targets) {
    if (t < 0 || t >= n_features) throw ConfigError(fmt::format("target feature {} out of range", t));
    const double sigma = scales ? (*scales)(t) : 1.0;
    const double m = 1.0 - alpha * sigma;
    if (m < 0.0 || m > 1.0) ++clamped;
    mask(t) = static_cast<float>(std::clamp(m, 0.0, 1.0));
  }
  if (clamped > 0 && warnings) {
    warnings->push_back(fmt::format("attenuation clamped to [0, 1] on {} feature(s)", clamped));
  }
  return mask;
}

VectorF calibrate_scales(const SaeModel& sae, const RowMatrixF& sample) {
  if (sample.rows() == 0) throw ConfigError("scale calibration needs a nonempty sample");
  const auto code = encode(sae, sample);
  Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(sae.features());
  Eigen::VectorXd count = Eigen::VectorXd::Zero(sae.features());
  for (std::size_t i = 0; i < code.indices.size(); ++i) {
    const double v = code.values[i];
    if (v > 0.0) {
      sum_sq(code.indices[i]) += v * v;
      count(code.indices[i]) += 1.0;
    }
  }
  Eigen::VectorXd rms = Eigen::VectorXd::Zero(sae.features());
  for (Eigen::Index j = 0; j < rms.size(); ++j) {
    if (count(j) > 0.0) rms(j) = std::sqrt(sum_sq(j) / count(j));
  }
  const double top = rms.maxCoeff();
  if (top > 0.0) rms /= top;
  return rms.cast<float>();
}

InterventionSpec make_spec(int layer, InterventionMode mode, int n_features, const std::set<int>& targets,
                           double alpha, const std::optional<VectorF>& scales, std::vector<std::string>* warnings) {
  InterventionSpec spec;
  spec.layer = layer;
  spec.mode = mode;
  spec.target_features = targets;
  spec.alpha = alpha;
  spec.scales = scales;
  spec.mask = attenuation_mask(n_features, targets, alpha, scales, warnings);
  return spec;
}

HiddenHook make_hook(const SaeModel& sae, const InterventionSpec& spec) {
  spec.validate(sae.features());
  auto model = std::make_shared<const SaeModel>(sae);
  auto mask = std::make_shared<const VectorF>(spec.mask);
  HiddenHook hook;
  hook.layer = spec.layer;
  if (spec.mode == InterventionMode::delta) {
    hook.apply = [model, mask](Eigen::Ref<RowMatrixF> h) { apply_delta_rows(h, *model, *mask); };
  } else {
    hook.apply = [model, mask](Eigen::Ref<RowMatrixF> h) { apply_reconstruct_rows(h, *model, *mask); };
  }
  return hook;
}

std::set<int> features_with_top_token(std::span<const FeatureProfile> profiles, int token) {
  std::set<int> out;
  for (const auto& p : profiles) {
    if (p.total_mass > 0.0 && p.top_token == token) out.insert(p.feature_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise floor
// ---------------------------------------------------------------------------

NoiseFloor noise_floor(const ModelWeights& weights, std::span<const std::vector<int>> sequences,
                       const SaeModel& sae, int layer, InterventionMode mode) {
  const auto spec = make_spec(layer, mode, sae.features(), {}, 0.0);
  const auto hook = make_hook(sae, spec);
  NoiseFloor nf;
  nf.mode = mode;
  double sum_logit = 0.0, sum_or = 0.0;
  std::int64_t n_logits = 0, n_or = 0;
  for (const auto& seq : sequences) {
    DecodeState clean(weights, std::nullopt);
    DecodeState hooked(weights, hook);
    for (int tok : seq) {
      const Eigen::RowVectorXf a = clean.push(tok);
      const Eigen::RowVectorXf b = hooked.push(tok);
      ++nf.positions;
      if (std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) != 0) {
        nf.bit_identical = false;
      }
      const Eigen::RowVectorXd diff = (a.cast<double>() - b.cast<double>()).cwiseAbs();
      nf.max_abs_logit_dev = std::max(nf.max_abs_logit_dev, diff.maxCoeff());
      sum_logit += diff.sum();
      n_logits += diff.size();
      const auto p = softmax(a);
      const auto q = softmax(b);
      for (Eigen::Index t = 0; t < p.size(); ++t) {
        if (!(p(t) > 0.0 && p(t) < 1.0 && q(t) > 0.0 && q(t) < 1.0)) continue;
        const double odds_ratio = (q(t) / (1.0 - q(t))) / (p(t) / (1.0 - p(t)));
        const double dev = std::abs(odds_ratio - 1.0);
        nf.max_odds_ratio_dev = std::max(nf.max_odds_ratio_dev, dev);
        sum_or += dev;
        ++n_or;
      }
    }
  }
  nf.mean_abs_logit_dev = n_logits ? sum_logit / static_cast<double>(n_logits) : 0.0;
  nf.mean_odds_ratio_dev = n_or ? sum_or / static_cast<double>(n_or) : 0.0;
  return nf;
}

double noise_floor_ratio(const NoiseFloor& reconstruct, const NoiseFloor& delta) {
  if (delta.mean_odds_ratio_dev == 0.0) {
    return reconstruct.mean_odds_ratio_dev > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  }
  return reconstruct.mean_odds_ratio_dev / delta.mean_odds_ratio_dev;
}

// ---------------------------------------------------------------------------
// Difference in differences
// ---------------------------------------------------------------------------

void DiDConfig::validate() const {
  if (n_patients <= 0 || n_samples <= 0 || n_steps <= 0 || prefix_tokens <= 0) {
    throw ConfigError("DiD sampling parameters must be positive");
  }
  if (!(temperature > 0.0)) throw ConfigError("DiD temperature must be positive");
}

DiDArms did_arms(const ModelWeights& weights, const Cohort& cohort, const PlantedAssociation& association,
                 const std::optional<HiddenHook>& hook, const DiDConfig& config) {
  config.validate();
  const auto& vocab = cohort.vocabulary;
  if (association.outcome_token_high < 0 || association.outcome_token_high >= vocab.size()) {
    throw ConfigError("outcome token absent from vocabulary");
  }
  if (association.treatment_token < 0 || association.treatment_token >= vocab.size()) {
    throw ConfigError("treatment token absent from vocabulary");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    if (!input_tokens(cohort.patients[i], vocab).empty()) order.push_back(i);
  }
  if (order.empty()) throw ConfigError("cohort has no usable patients");
  Rng rng(derive_seed(config.seed, 0x70617469));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), static_cast<std::size_t>(config.n_patients)));

  const int outcome = association.outcome_token_high;
  struct PatientArms {
    double pre = 0.0;
    double treated_post = 0.0;
    double control_post = 0.0;
  };
  auto per_patient = run_jobs_or_throw<PatientArms>(order.size(), config.jobs, [&](std::size_t p) {
    auto tokens = input_tokens(cohort.patients[order[p]], vocab);
    tokens.resize(std::min(tokens.size(), static_cast<std::size_t>(config.prefix_tokens)));
    PatientArms out;
    out.pre = static_cast<double>(std::count(tokens.begin(), tokens.end(), outcome)) /
              static_cast<double>(tokens.size());
    for (int arm = 0; arm < 2; ++arm) {
      DecodeState state(weights, hook);
      Eigen::RowVectorXf logits;
      for (int t : tokens) logits = state.push(t);
      if (arm == 1) logits = state.push(association.treatment_token);
      double hits = 0.0;
      for (int s = 0; s < config.n_samples; ++s) {
        GenerationOptions opt;
        opt.n_steps = config.n_steps;
        opt.temperature = config.temperature;
        opt.seed = derive_seed(config.seed, 0x636e, order[p], static_cast<std::uint64_t>(s));
        const auto gen = continue_from(state, logits, opt);
        hits += static_cast<double>(std::count(gen.begin(), gen.end(), outcome));
      }
      const double freq = hits / (static_cast<double>(config.n_samples) * config.n_steps);
      (arm == 1 ? out.treated_post : out.control_post) = freq;
    }
    return out;
  });
  DiDArms arms;
  for (const auto& p : per_patient) {
    arms.treated_pre += p.pre;
    arms.control_pre += p.pre;
    arms.treated_post += p.treated_post;
    arms.control_post += p.control_post;
  }
  const auto n = static_cast<double>(per_patient.size());
  arms.treated_pre /= n;
  arms.control_pre /= n;
  arms.treated_post /= n;
  arms.control_post /= n;
  return arms;
}

namespace {

DiDResult combine(const DiDArms& unperturbed, const DiDArms& perturbed, const Cohort& cohort,
                  const DiDConfig& config) {
  DiDResult r;
  r.unperturbed = unperturbed;
  r.perturbed = perturbed;
  r.did_unperturbed = unperturbed.did();
  r.did_perturbed = perturbed.did();
  r.delta_did = r.did_perturbed - r.did_unperturbed;
  r.n_patients = static_cast<int>(std::min<std::size_t>(cohort.patients.size(), static_cast<std::size_t>(config.n_patients)));
  r.n_samples_per_arm = config.n_samples;
  return r;
}

}  // namespace

DiDResult did_experiment(const ModelWeights& weights, const Cohort& cohort, const PlantedAssociation& association,
                         const SaeModel* sae, const std::optional<InterventionSpec>& spec, const DiDConfig& config) {
  std::optional<HiddenHook> hook;
  if (spec) {
    if (sae == nullptr) throw ConfigError("an intervention spec needs an SAE");
    hook = make_hook(*sae, *spec);
  }
  const auto base = did_arms(weights, cohort, association, std::nullopt, config);
  const auto pert = hook ? did_arms(weights, cohort, association, hook, config) : base;
  return combine(base, pert, cohort, config);
}

std::vector<std::set<int>> random_control_sets(int n_features, const std::set<int>& target, int n_sets,
                                               std::uint64_t seed) {
  if (n_sets <= 0) throw ConfigError("need at least one control set");
  if (target.empty()) throw ConfigError("target feature set is empty");
  std::vector<int> pool;
  for (int j = 0; j < n_features; ++j) {
    if (!target.count(j)) pool.push_back(j);
  }
  if (pool.size() < target.size()) {
    throw ConfigError(fmt::format("{} features cannot supply disjoint control sets of size {}", n_features,
                                  target.size()));
  }
  std::vector<std::set<int>> sets;
  for (int s = 0; s < n_sets; ++s) {
    Rng rng(derive_seed(seed, 0x636f6e74, static_cast<std::uint64_t>(s)));
    std::vector<int> p = pool;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const auto j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(p.size() - i));
      std::swap(p[i], p[j]);
    }
    sets.emplace_back(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(target.size()));
  }
  return sets;
}

ControlEnsemble control_comparison(const ModelWeights& weights, const Cohort& cohort,
                                   const PlantedAssociation& association, const SaeModel& sae,
                                   const InterventionSpec& target, int n_control_sets, const DiDConfig& config) {
  target.validate(sae.features());
  ControlEnsemble out;
  out.sets = random_control_sets(sae.features(), target.target_features, n_control_sets, config.seed);
  const auto base = did_arms(weights, cohort, association, std::nullopt, config);
  out.targeted = combine(base, did_arms(weights, cohort, association, make_hook(sae, target), config), cohort, config);
  out.targeted_delta = out.targeted.delta_did;
  for (const auto& set : out.sets) {
    const auto spec = make_spec(target.layer, target.mode, sae.features(), set, target.alpha, target.scales);
    const auto arms = did_arms(weights, cohort, association, make_hook(sae, spec), config);
    out.control_deltas.push_back(arms.did() - base.did());
  }
  const auto& d = out.control_deltas;
  out.random_mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  out.random_min = *std::min_element(d.begin(), d.end());
  out.random_max = *std::max_element(d.begin(), d.end());
  out.ratio = out.random_mean == 0.0 ? std::numeric_limits<double>::infinity()
                                     : std::abs(out.targeted_delta) / std::abs(out.random_mean);
  out.outside_range = out.targeted_delta < out.random_min || out.targeted_delta > out.random_max;
  return out;
}

void write_intervention_csv(const std::filesystem::path& path, std::span<const InterventionRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "experiment,mode,targeted_delta,random_mean,random_min,random_max,ratio,outside_range\n";
  for (const auto& r : rows) {
    const auto& e = r.ensemble;
    out << r.experiment << ',' << to_string(r.mode) << ',' << csv_num(e.targeted_delta) << ','
        << csv_num(e.random_mean) << ',' << csv_num(e.random_min) << ',' << csv_num(e.random_max) << ','
        << csv_num(e.ratio) << ',' << (e.outside_range ? 1 : 0) << '\n';
  }
}

std::string intervention_manifest_json(const InterventionSpec& spec, const DiDConfig& config,
                                       const PlantedAssociation& association, const Vocabulary& vocab,
                                       const ControlEnsemble& result) {
  nlohmann::ordered_json j;
  j["estimand"] = "delta_did = did(perturbed) - did(unperturbed); did = (treated_post - treated_pre) - "
                  "(control_post - control_pre); post = outcome token frequency over generated tokens, "
                  "pre = outcome token frequency in the prefix window; treated arm appends the treatment token";
  j["spec"] = {{"layer", spec.layer},
               {"mode", to_string(spec.mode)},
               {"alpha", spec.alpha},
               {"targets", std::vector<int>(spec.target_features.begin(), spec.target_features.end())},
               {"scaled", spec.scales.has_value()},
               {"intervened_positions", "prefill and generated"}};
  j["config"] = {{"n_patients", config.n_patients}, {"n_samples", config.n_samples},
                 {"n_steps", config.n_steps},       {"prefix_tokens", config.prefix_tokens},
                 {"temperature", config.temperature}, {"seed", config.seed}};
  j["association"] = {{"treatment", vocab.token(association.treatment_token)},
                      {"outcome", vocab.token(association.outcome_token_high)},
                      {"effect_size", association.effect_size}};
  nlohmann::ordered_json sets = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < result.sets.size(); ++i) {
    sets.push_back({{"features", std::vector<int>(result.sets[i].begin(), result.sets[i].end())},
                    {"delta_did", result.control_deltas[i]}});
  }
  j["result"] = {{"did_unperturbed", result.targeted.did_unperturbed},
                 {"did_perturbed", result.targeted.did_perturbed},
                 {"targeted_delta", result.targeted_delta},
                 {"random_mean", result.random_mean},
                 {"random_min", result.random_min},
                 {"random_max", result.random_max},
                 {"ratio", std::isfinite(result.ratio) ? nlohmann::ordered_json(result.ratio)
                                                       : nlohmann::ordered_json("inf")},
                 {"outside_range", result.outside_range},
                 {"control_sets", sets}};
  return j.dump(2);
}

}  // namespace saelab
