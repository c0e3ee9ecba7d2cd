#include "saelab/datagen.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace saelab {
namespace {

constexpr std::string_view kLabCategory = "LAB";
constexpr std::string_view kEndCategory = "END";
constexpr std::string_view kDischargeMarker = "END:DISCHARGE";

struct TimeProfile {
  double log_median_hours;
  double log_sd;
};

TimeProfile profile_for(Setting s) {
  switch (s) {
    case Setting::icu:
      return {std::log(3.0), 0.7};
    case Setting::outpatient:
      return {std::log(24.0 * 20.0), 1.0};
  }
  return {std::log(3.0), 0.7};
}

double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

int pick_index(double u, std::size_t n) {
  return std::min(static_cast<int>(u * static_cast<double>(n)), static_cast<int>(n) - 1);
}

int sample_softmax(const std::vector<double>& logits, double u) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - mx);
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    acc += std::exp(logits[i] - mx) / total;
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(logits.size()) - 1;
}

// Token groups used during emission.
struct EmissionTable {
  struct Lab {
    std::array<int, 5> quintiles;
  };
  std::vector<Lab> labs;
  struct Group {
    std::vector<int> tokens;
    std::vector<double> loadings;
  };
  std::vector<Group> groups;  // MED, DX, ... (non-LAB, non-END)
  std::vector<double> category_weights;  // labs first (if any), then groups
  std::vector<int> death_markers;
  int discharge_marker = -1;
};

EmissionTable build_emission_table(const Vocabulary& vocab, std::uint64_t seed) {
  EmissionTable table;
  std::map<std::string, std::size_t> group_of;
  std::map<std::string, std::size_t> lab_of;
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(id)) continue;
    const auto& tok = vocab.token(id);
    const auto& cat = vocab.category_of(id);
    if (cat == kLabCategory) {
      const auto stem = tok.substr(0, tok.rfind(':'));
      const int q = tok.back() - '1';
      auto [it, inserted] = lab_of.try_emplace(stem, table.labs.size());
      if (inserted) table.labs.push_back({{-1, -1, -1, -1, -1}});
      table.labs[it->second].quintiles[static_cast<std::size_t>(q)] = id;
    } else if (cat == kEndCategory) {
      if (tok == kDischargeMarker) {
        table.discharge_marker = id;
      } else {
        table.death_markers.push_back(id);
      }
    } else {
      auto [it, inserted] = group_of.try_emplace(cat, table.groups.size());
      if (inserted) table.groups.emplace_back();
      auto& g = table.groups[it->second];
      g.tokens.push_back(id);
      Rng r(derive_seed(seed, 0x10ad, static_cast<std::uint64_t>(id)));
      g.loadings.push_back(2.0 * uniform01(r) - 1.0);
    }
  }
  if (!table.labs.empty()) table.category_weights.push_back(2.0);
  for (std::size_t i = 0; i < table.groups.size(); ++i) table.category_weights.push_back(1.0);
  if (table.category_weights.empty()) throw ConfigError("vocabulary has no emittable tokens");
  const double total =
      std::accumulate(table.category_weights.begin(), table.category_weights.end(), 0.0);
  for (double& w : table.category_weights) w /= total;
  return table;
}

std::string format_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

std::string category_label(std::string_view token) {
  const auto pos = token.find(':');
  if (pos == std::string_view::npos) return std::string(Vocabulary::kSpecialCategory);
  return std::string(token.substr(0, pos));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  std::map<std::string, int> cat_index;
  for (int id = 0; id < size(); ++id) {
    const auto& tok = tokens_[static_cast<std::size_t>(id)];
    if (tok.empty()) throw ConfigError("empty token string at index " + std::to_string(id));
    if (!index_.emplace(tok, id).second) throw ConfigError("duplicate token '" + tok + "'");
    const auto cat = category_label(tok);
    auto [it, inserted] = cat_index.try_emplace(cat, static_cast<int>(categories_.size()));
    if (inserted) categories_.push_back(cat);
    category_index_.push_back(it->second);
  }
  const auto death = find(kDeath);
  if (!death) throw ConfigError("vocabulary lacks the [DEATH] token");
  death_id_ = *death;
  pad_id_ = find(kPad).value_or(-1);
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id_of(std::string_view token) const {
  auto id = find(token);
  if (!id) throw ConfigError("token '" + std::string(token) + "' not in vocabulary");
  return *id;
}

Vocabulary build_vocabulary(const VocabConfig& config) {
  if (config.categories.empty()) throw ConfigError("no categories");
  std::vector<std::string> tokens;
  std::set<std::string> labels;
  for (const auto& cat : config.categories) {
    if (cat.label.empty() || cat.label.find(':') != std::string::npos) {
      throw ConfigError("invalid category label '" + cat.label + "'");
    }
    if (!labels.insert(cat.label).second) {
      throw ConfigError("duplicate category '" + cat.label + "'");
    }
    std::set<std::string> seen;
    for (const auto& stem : cat.stems) {
      if (!seen.insert(stem).second) {
        throw ConfigError("duplicate stem '" + stem + "' in category " + cat.label);
      }
      const std::string base = cat.label + ":" + stem;
      if (cat.label == kLabCategory) {
        for (int q = 1; q <= 5; ++q) tokens.push_back(base + ":Q" + std::to_string(q));
      } else {
        tokens.push_back(base);
      }
    }
  }
  tokens.emplace_back(Vocabulary::kDeath);
  tokens.emplace_back(Vocabulary::kPad);
  return Vocabulary(std::move(tokens));
}

VocabConfig full_scale_vocab_config() {
  auto numbered = [](std::string_view prefix, int n, std::vector<std::string> named) {
    for (int i = static_cast<int>(named.size()); i < n; ++i) {
      named.push_back(fmt::format("{}{:02d}", prefix, i + 1));
    }
    return named;
  };
  VocabConfig cfg;
  cfg.categories.push_back(
      {"LAB", numbered("L", 30, {"NA", "K", "CREAT", "HGB", "WBC", "LACTATE", "INR", "TROPONIN",
                                 "HBA1C", "GLUCOSE"})});
  cfg.categories.push_back(
      {"MED", numbered("M", 47, {"WARFARIN", "HEPARIN", "INSULIN", "METFORMIN", "VASOPRESSOR",
                                 "ANTIBIOTIC", "OPIOID", "BENZO", "PROPOFOL", "DIURETIC"})});
  cfg.categories.push_back(
      {"DX", numbered("D", 40, {"SEPSIS", "AKI", "CHF", "PNEUMONIA", "DIABETES", "COPD"})});
  return cfg;
}

VocabConfig desk_vocab_config(bool with_end_markers) {
  VocabConfig cfg;
  cfg.categories.push_back(
      {"LAB", {"NA", "K", "CREAT", "HGB", "WBC", "LACTATE", "INR", "TROPONIN"}});
  cfg.categories.push_back({"MED",
                            {"WARFARIN", "HEPARIN", "INSULIN", "VASOPRESSOR", "ANTIBIOTIC",
                             "OPIOID", "BENZO", "PROPOFOL", "DIURETIC", "METFORMIN"}});
  cfg.categories.push_back({"DX", {"SEPSIS", "AKI", "CHF", "PNEUMONIA", "DIABETES", "COPD"}});
  if (with_end_markers) {
    cfg.categories.push_back({"END", {"COMFORT_CARE", "WITHDRAWAL", "DISCHARGE"}});
  }
  return cfg;
}

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (int id = 0; id < vocab.size(); ++id) out << id << '\t' << vocab.token(id) << '\n';
}

Vocabulary read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingPrerequisite("vocabulary file '" + path.string() + "' not found");
  std::vector<std::string> tokens;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoi(line.substr(0, tab)) != static_cast<int>(tokens.size())) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected '<index>\\t<token>'");
    }
    tokens.push_back(line.substr(tab + 1));
  }
  return Vocabulary(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Cohort generation
// ---------------------------------------------------------------------------

Cohort generate_cohort(const CohortConfig& config, std::uint64_t seed) {
  if (config.n_patients <= 0) throw ConfigError("n_patients must be positive");
  if (!(config.mortality_rate > 0.0 && config.mortality_rate < 1.0)) {
    throw ConfigError("mortality_rate must lie in (0, 1)");
  }
  if (config.min_events < 1 || config.max_events < config.min_events) {
    throw ConfigError("event range must satisfy 1 <= min_events <= max_events");
  }
  if (!(config.length_severity_corr >= 0.0 && config.length_severity_corr < 1.0)) {
    throw ConfigError("length_severity_corr must lie in [0, 1)");
  }

  Cohort cohort;
  cohort.vocabulary = build_vocabulary(config.vocab);
  cohort.generation_seed = seed;
  const auto& vocab = cohort.vocabulary;
  const auto table = build_emission_table(vocab, seed);
  if (config.end_of_stay_markers && table.death_markers.empty()) {
    throw ConfigError("end_of_stay_markers requires END marker stems in the vocabulary");
  }

  if (config.planted) {
    const auto& p = *config.planted;
    if (!(p.effect_size >= 0.0 && p.effect_size <= 1.0)) {
      throw ConfigError("effect_size must lie in [0, 1]");
    }
    PlantedAssociation a{vocab.id_of(p.treatment_token), vocab.id_of(p.outcome_token_high),
                         p.effect_size};
    if (a.treatment_token == a.outcome_token_high) {
      throw ConfigError("treatment and outcome tokens must differ");
    }
    cohort.planted = a;
  }

  const auto profile = profile_for(config.setting);
  const auto n = static_cast<std::size_t>(config.n_patients);
  cohort.patients.resize(n);
  cohort.latent_severity.resize(n);

  // Pass 1: event stream and latent path per patient.
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 1, i));
    auto& rec = cohort.patients[i];
    const int span = config.max_events - config.min_events + 1;
    double s = normal(rng);
    // Gaussian copula: sicker patients tend to have longer stays.
    const double rho = config.length_severity_corr;
    const double q = 0.5 * std::erfc(-(rho * s + std::sqrt(1.0 - rho * rho) * normal(rng)) / std::sqrt(2.0));
    int length = config.min_events + pick_index(q, static_cast<std::size_t>(span));
    double peak = s;
    std::set<int> scheduled;
    for (int t = 0; t < length; ++t) {
      if (t > 0) {
        s = std::clamp(s + config.severity_step_sd * normal(rng), -config.severity_bound,
                       config.severity_bound);
        peak = std::max(peak, s);
      }
      const double u_cat = uniform01(rng);
      const double u_tok = uniform01(rng);
      const double u_q = uniform01(rng);
      const double u_treat = uniform01(rng);
      const double z_gap = normal(rng);

      int cat = 0;
      {
        double acc = 0.0;
        for (std::size_t c = 0; c < table.category_weights.size(); ++c) {
          acc += table.category_weights[c];
          cat = static_cast<int>(c);
          if (u_cat < acc) break;
        }
      }
      int token = -1;
      const bool has_labs = !table.labs.empty();
      if (has_labs && cat == 0) {
        const auto& lab = table.labs[static_cast<std::size_t>(pick_index(u_tok, table.labs.size()))];
        std::vector<double> logits(5);
        for (int q = 0; q < 5; ++q) logits[static_cast<std::size_t>(q)] = (q - 2) * config.lab_severity_gain * s;
        token = lab.quintiles[static_cast<std::size_t>(sample_softmax(logits, u_q))];
      } else {
        const auto& g = table.groups[static_cast<std::size_t>(cat - (has_labs ? 1 : 0))];
        std::vector<double> logits(g.tokens.size());
        for (std::size_t j = 0; j < logits.size(); ++j) {
          logits[j] = g.loadings[j] * config.token_severity_gain * s;
        }
        token = g.tokens[static_cast<std::size_t>(sample_softmax(logits, u_tok))];
      }
      if (cohort.planted) {
        if (u_treat < config.treatment_rate) token = cohort.planted->treatment_token;
        if (scheduled.count(t)) token = cohort.planted->outcome_token_high;
        if (token == cohort.planted->treatment_token) {
          const double u_eff = uniform01(rng);
          const int offset = 1 + pick_index(uniform01(rng), 5);
          if (u_eff < cohort.planted->effect_size) {
            scheduled.insert(t + offset);
            length = std::max(length, t + offset + 1);
          }
        }
      }
      rec.token_ids.push_back(token);
      rec.time_deltas.push_back(
          t == 0 ? 0.0
                 : std::exp(profile.log_median_hours + config.los_severity_gain * s +
                            profile.log_sd * z_gap));
    }
    cohort.latent_severity[i] = peak;
  }

  // Deaths: exactly round(rate * N) patients with the highest peak severity.
  const auto n_deaths = static_cast<std::size_t>(std::llround(config.mortality_rate * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cohort.latent_severity[a] > cohort.latent_severity[b];
  });
  std::vector<bool> dies(n, false);
  for (std::size_t r = 0; r < n_deaths; ++r) dies[order[r]] = true;

  // Pass 2: terminal events, LoS, demographics.
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 2, i));
    auto& rec = cohort.patients[i];
    rec.died = dies[i];
    rec.demographics["sex"] = uniform01(rng) < 0.5 ? "F" : "M";
    rec.demographics["group"] = std::string(1, static_cast<char>('A' + pick_index(uniform01(rng), 3)));
    rec.demographics["age_decile"] = std::to_string(2 + pick_index(uniform01(rng), 7));
    auto marker_gap = [&] { return std::exp(0.5 * normal(rng)); };
    if (config.end_of_stay_markers) {
      if (rec.died) {
        for (int m : table.death_markers) {
          const double gap = marker_gap();
          if (uniform01(rng) < config.marker_probability) {
            rec.token_ids.push_back(m);
            rec.time_deltas.push_back(gap);
          }
        }
      } else if (table.discharge_marker >= 0) {
        const double gap = marker_gap();
        if (uniform01(rng) < config.marker_probability) {
          rec.token_ids.push_back(table.discharge_marker);
          rec.time_deltas.push_back(gap);
        }
      }
    }
    double elapsed = std::accumulate(rec.time_deltas.begin(), rec.time_deltas.end(), 0.0);
    if (rec.died) {
      rec.token_ids.push_back(vocab.death_id());
      rec.time_deltas.push_back(0.0);
      if (elapsed <= 0.0) elapsed = marker_gap();
    } else {
      elapsed += std::exp(std::log(2.0) + 0.5 * normal(rng));
    }
    rec.los_hours = elapsed;
    rec.time_to_event_hours = elapsed;
  }
  return cohort;
}

std::vector<int> input_tokens(const PatientRecord& record, const Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(record.token_ids.size());
  for (int id : record.token_ids) {
    if (id != vocab.death_id()) out.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cohort serialization
// ---------------------------------------------------------------------------

void write_cohort(const std::filesystem::path& path, const Cohort& cohort) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  const auto& vocab = cohort.vocabulary;
  out << "# saelab-cohort v1\n";
  out << "# seed=" << cohort.generation_seed << '\n';
  if (cohort.planted) {
    out << "# planted=" << vocab.token(cohort.planted->treatment_token) << ','
        << vocab.token(cohort.planted->outcome_token_high) << ','
        << format_double(cohort.planted->effect_size) << '\n';
  } else {
    out << "# planted=none\n";
  }
  out << "# columns=id\tdied\tlos_hours\tevents\tdemographics\n";
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& p = cohort.patients[i];
    out << i << '\t' << (p.died ? 1 : 0) << '\t' << format_double(p.los_hours) << '\t';
    for (std::size_t t = 0; t < p.token_ids.size(); ++t) {
      if (t) out << ';';
      out << vocab.token(p.token_ids[t]) << ':' << format_double(p.time_deltas[t]);
    }
    out << '\t';
    bool first = true;
    for (const auto& [k, v] : p.demographics) {
      if (!first) out << ',';
      out << k << '=' << v;
      first = false;
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

Cohort read_cohort(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cohort file '" + path.string() + "' not found");
  Cohort cohort;
  cohort.vocabulary = vocab;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# seed=", 0) == 0) cohort.generation_seed = std::stoull(line.substr(7));
      if (line.rfind("# planted=", 0) == 0 && line.substr(10) != "none") {
        const auto parts = split(line.substr(10), ',');
        if (parts.size() != 3) fail("malformed planted header");
        cohort.planted = PlantedAssociation{vocab.id_of(parts[0]), vocab.id_of(parts[1]),
                                            std::stod(parts[2])};
      }
      continue;
    }
    const auto cols = split(line, '\t');
    if (cols.size() < 4) fail("expected at least 4 tab-separated columns");
    if (std::stoul(cols[0]) != cohort.patients.size()) fail("patient ids must be sequential");
    PatientRecord rec;
    rec.died = cols[1] == "1";
    rec.los_hours = std::stod(cols[2]);
    rec.time_to_event_hours = rec.los_hours;
    if (!cols[3].empty()) {
      for (const auto& pair : split(cols[3], ';')) {
        const auto colon = pair.rfind(':');
        if (colon == std::string::npos) fail("event '" + pair + "' lacks ':delta'");
        const auto id = vocab.find(std::string_view(pair).substr(0, colon));
        if (!id) fail("unknown token in '" + pair + "'");
        rec.token_ids.push_back(*id);
        rec.time_deltas.push_back(std::stod(pair.substr(colon + 1)));
      }
    }
    if (cols.size() > 4 && !cols[4].empty()) {
      for (const auto& kv : split(cols[4], ',')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail("demographic entry '" + kv + "' lacks '='");
        rec.demographics[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
    }
    cohort.patients.push_back(std::move(rec));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Planted dictionary
// ---------------------------------------------------------------------------

PlantedDictionarySet planted_dictionary_dataset(int width, int f_true, int k_true, int n,
                                                double noise_sigma, std::uint64_t seed) {
  if (width < 2) throw ConfigError("width must be at least 2");
  if (f_true < 1 || k_true < 1) throw ConfigError("F_true and K_true must be positive");
  if (k_true > f_true) throw ConfigError("K_true must not exceed F_true");
  if (n < 0 || noise_sigma < 0.0) throw ConfigError("N and noise_sigma must be nonnegative");

  PlantedDictionarySet set;
  set.noise_sigma = noise_sigma;
  set.k_true = k_true;
  set.atoms.resize(f_true, width);
  Rng atom_rng(derive_seed(seed, 11));
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  for (int f = 0; f < f_true; ++f) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("cannot draw mutually distinct atoms at this width");
      Eigen::RowVectorXf v(width);
      for (int j = 0; j < width; ++j) v[j] = gauss(atom_rng);
      v.normalize();
      bool distinct = true;
      for (int g = 0; g < f && distinct; ++g) {
        distinct = std::abs(set.atoms.row(g).dot(v)) < 0.9f;
      }
      if (distinct) {
        set.atoms.row(f) = v;
        break;
      }
    }
  }

  set.codes = RowMatrixF::Zero(n, f_true);
  set.samples.resize(n, width);
  Rng code_rng(derive_seed(seed, 12));
  std::vector<int> pool(static_cast<std::size_t>(f_true));
  for (int i = 0; i < n; ++i) {
    std::iota(pool.begin(), pool.end(), 0);
    for (int j = 0; j < k_true; ++j) {
      const int pick = j + pick_index(uniform01(code_rng), static_cast<std::size_t>(f_true - j));
      std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick)]);
      const double c = kPlantedCodeLow + (kPlantedCodeHigh - kPlantedCodeLow) * uniform01(code_rng);
      set.codes(i, pool[static_cast<std::size_t>(j)]) = static_cast<float>(c);
    }
  }
  set.samples.noalias() = set.codes * set.atoms;
  if (noise_sigma > 0.0) {
    Rng noise_rng(derive_seed(seed, 13));
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (Eigen::Index i = 0; i < set.samples.size(); ++i) {
      set.samples.data()[i] += static_cast<float>(noise(noise_rng));
    }
  }
  return set;
}

}  // namespace saelab
