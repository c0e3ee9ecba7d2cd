#pragma once

#include "saelab/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace saelab {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct CategorySpec {
  std::string label;               // e.g. "LAB", "MED", "DX", "END"
  std::vector<std::string> stems;  // LAB stems expand into Q1..Q5 tokens
};

struct VocabConfig {
  std::vector<CategorySpec> categories;
};

/// Flat composite-token vocabulary. A token's category is the text before
/// its first colon; bracketed specials such as "[DEATH]" belong to "SPECIAL".
class Vocabulary {
 public:
  static constexpr std::string_view kDeath = "[DEATH]";
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kSpecialCategory = "SPECIAL";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<int> find(std::string_view token) const;
  int id_of(std::string_view token) const;  // throws ConfigError when absent

  const std::string& category_of(int id) const { return categories_.at(static_cast<std::size_t>(category_index_.at(static_cast<std::size_t>(id)))); }
  int category_index(int id) const { return category_index_.at(static_cast<std::size_t>(id)); }
  /// Distinct categories in first-appearance order.
  const std::vector<std::string>& categories() const { return categories_; }

  int death_id() const { return death_id_; }
  int pad_id() const { return pad_id_; }
  bool is_special(int id) const { return id == death_id_ || id == pad_id_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
  std::vector<std::string> categories_;
  std::vector<int> category_index_;
  int death_id_ = -1;
  int pad_id_ = -1;
};

std::string category_label(std::string_view token);

Vocabulary build_vocabulary(const VocabConfig& config);

/// 30 lab stems, 47 medications, 40 diagnoses: 239 tokens with specials.
VocabConfig full_scale_vocab_config();
/// Small vocabulary for the desk-scale pipeline. Includes the planted
/// treatment (MED:WARFARIN) and outcome (LAB:INR) stems; END markers optional.
VocabConfig desk_vocab_config(bool with_end_markers);

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary read_vocabulary(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

struct PatientRecord {
  std::vector<int> token_ids;
  std::vector<double> time_deltas;  // hours; time_deltas[0] == 0
  bool died = false;
  double los_hours = 0.0;
  double time_to_event_hours = 0.0;
  std::map<std::string, std::string> demographics;
};

struct PlantedAssociation {
  int treatment_token = -1;
  int outcome_token_high = -1;
  double effect_size = 0.0;
};

struct PlantedAssociationSpec {
  std::string treatment_token = "MED:WARFARIN";
  std::string outcome_token_high = "LAB:INR:Q5";
  double effect_size = 1.0;
};

enum class Setting { icu, outpatient };

struct CohortConfig {
  int n_patients = 2000;
  int min_events = 16;
  int max_events = 40;
  double mortality_rate = 0.053;
  Setting setting = Setting::icu;
  VocabConfig vocab = desk_vocab_config(false);

  // Latent severity: bounded Gaussian random walk started from N(0, 1).
  double severity_step_sd = 0.3;
  double severity_bound = 3.0;
  double lab_severity_gain = 1.2;    // logistic slope of quintile emission
  double token_severity_gain = 1.0;  // softmax slope of MED/DX emission
  double los_severity_gain = 0.0;    // log-hours of gap per unit severity
  double length_severity_corr = 0.7; // copula correlation of event count with initial severity

  // End-of-stay marker tokens (category END) placed just before discharge
  // or [DEATH]. Requires END stems in the vocabulary.
  bool end_of_stay_markers = false;
  double marker_probability = 0.9;

  double treatment_rate = 0.05;
  std::optional<PlantedAssociationSpec> planted;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  Vocabulary vocabulary;
  std::uint64_t generation_seed = 0;
  std::optional<PlantedAssociation> planted;
  /// Maximum of each patient's latent severity path (deaths are the top
  /// mortality_rate fraction). Oracle only; not serialized.
  std::vector<double> latent_severity;
};

Cohort generate_cohort(const CohortConfig& config, std::uint64_t seed);

/// Model input for a record: its tokens with [DEATH] removed.
std::vector<int> input_tokens(const PatientRecord& record, const Vocabulary& vocab);

/// Cohort text format: '#' header lines, then one patient per line
/// `id<TAB>died<TAB>los_hours<TAB>tok:delta;tok:delta;...<TAB>key=val,key=val`.
/// Vocabulary is written alongside (tokens are stored as strings).
void write_cohort(const std::filesystem::path& path, const Cohort& cohort);
Cohort read_cohort(const std::filesystem::path& path, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Planted dictionary
// ---------------------------------------------------------------------------

struct PlantedDictionarySet {
  RowMatrixF atoms;    // F_true x width, unit-norm rows
  RowMatrixF codes;    // N x F_true, exactly K_true positive entries per row
  RowMatrixF samples;  // N x width
  double noise_sigma = 0.0;
  int k_true = 0;
};

/// Code magnitudes are Uniform(kCodeLow, kCodeHigh) on a uniformly random
/// K_true-subset of atoms.
inline constexpr double kPlantedCodeLow = 0.5;
inline constexpr double kPlantedCodeHigh = 1.5;

PlantedDictionarySet planted_dictionary_dataset(int width, int f_true, int k_true, int n,
                                                double noise_sigma, std::uint64_t seed);

}  // namespace saelab
