#pragma once

#include "saelab/datagen.hpp"
#include "saelab/featurestats.hpp"
#include "saelab/intervene.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/readouts.hpp"
#include "saelab/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace saelab {

inline constexpr const char* kToolVersion = "0.1.0";

/// Flat "section.key" -> value view of a run configuration. Every key has a
/// default; files and overrides may only set known keys.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap default_config_map();
/// Overlays an INI file onto `base`. Unknown sections or keys are errors.
void overlay_config_file(ConfigMap& base, const std::filesystem::path& path);
/// Overlays one "section.key=value" assignment.
void overlay_assignment(ConfigMap& base, const std::string& assignment);

struct StabilitySettings {
  int n_seeds = 3;
  double threshold = 0.7;
};

struct InterventionSettings {
  InterventionMode mode = InterventionMode::delta;
  double alpha = 1.0;
  bool scaled = false;
  int control_sets = 10;
  int noise_patients = 30;
  DiDConfig did;
};

struct ProbeSettings {
  std::vector<WindowSpec> windows;
  std::vector<Representation> representations;
  std::vector<int> k_values;
  ProbeConfig probe;
};

struct SweepSettings {
  std::vector<int> layers;  // empty means every extraction point
  std::vector<int> expansions;
  std::vector<int> k_values;
  SweepOptions options;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  int jobs = 1;
  CohortConfig datagen;
  ModelConfig model;
  double plant_strength = 0.7;
  SaeConfig sae;
  int layer = 2;  // analysis layer for SAE, probes, interventions, matching
  SweepSettings sweep;
  ProbeSettings probes;
  InterventionSettings interventions;
  StabilitySettings stability;
  ConfigMap snapshot;

  std::vector<int> sweep_layers() const;
};

RunConfig resolve_config(const ConfigMap& map);

/// Output locations relative to the run directory.
namespace paths {
inline const char* kVocab = "vocab.tsv";
inline const char* kCohort = "cohort.tsv";
inline const char* kModel = "model.bin";
inline const char* kManifest = "manifest.json";
std::string activations(int layer);
std::string sae_checkpoint(int layer);
}  // namespace paths

std::string sha256_file(const std::filesystem::path& path);

struct StageRecord {
  std::string name;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  std::vector<std::string> inputs;   // relative paths
  std::vector<std::string> outputs;  // relative paths
};

/// Known stage names in pipeline order (excluding "all").
const std::vector<std::string>& stage_names();

/// Runs one stage and records it in the run manifest.
StageRecord run_stage(const std::string& name, const RunConfig& config);

/// Runs every stage in order.
std::vector<StageRecord> run_all(const RunConfig& config);

/// Recomputes every digest recorded in the manifest; returns the paths
/// whose digest differs or whose file is missing.
std::vector<std::string> verify_manifest(const std::filesystem::path& run_dir);

}  // namespace saelab
