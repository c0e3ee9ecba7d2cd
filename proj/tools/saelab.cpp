#include "saelab/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
  std::optional<std::string> layers;
  std::vector<std::string> sets;
};

saelab::RunConfig build_config(const GlobalFlags& f) {
  auto map = saelab::default_config_map();
  if (!f.config.empty()) saelab::overlay_config_file(map, f.config);
  for (const auto& s : f.sets) saelab::overlay_assignment(map, s);
  if (f.seed) map["run.seed"] = std::to_string(*f.seed);
  if (f.out) map["run.out"] = *f.out;
  if (f.jobs) map["run.jobs"] = std::to_string(*f.jobs);
  if (f.layers) map["sweep.layers"] = *f.layers;
  return saelab::resolve_config(map);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse autoencoder workbench for clinical sequence models"};
  app.set_version_flag("--version", saelab::kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags flags;
  app.add_option("--config", flags.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Global seed (overrides run.seed)");
  app.add_option("--out", flags.out, "Run directory (overrides run.out)");
  app.add_option("--jobs", flags.jobs, "Worker threads (overrides run.jobs)")->check(CLI::PositiveNumber);
  app.add_option("--layers", flags.layers, "Comma-separated extraction points, or 'all'");
  app.add_option("--set", flags.sets, "Override section.key=value (repeatable)");

  std::string chosen;
  auto add = [&](const std::string& name, const std::string& help) {
    app.add_subcommand(name, help)->callback([&chosen, name] { chosen = name; });
  };
  add("gen", "Generate the synthetic cohort, vocabulary and toy model");
  add("extract", "Extract per-layer activations in one pass per patient");
  add("train-sae", "Train the SAE at the analysis layer");
  add("sweep", "Layer sweep and hyperparameter grid");
  add("profile", "Feature token profiles and complexity summary");
  add("probe", "Mortality and length-of-stay probes, K-sensitivity, strata");
  add("cox", "Univariate Cox screen of SAE features");
  add("intervene", "Noise floor and targeted versus random ablations");
  add("match", "Cross-seed feature matching");
  add("report", "Verify digests and write the run report");
  add("all", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto config = build_config(flags);
    const auto names = chosen == "all" ? saelab::stage_names() : std::vector<std::string>{chosen};
    for (const auto& name : names) {
      const auto rec = saelab::run_stage(name, config);
      std::cerr << fmt::format("[{}] done in {:.2f}s, {} output(s)\n", name, rec.seconds, rec.outputs.size());
    }
  } catch (const saelab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
