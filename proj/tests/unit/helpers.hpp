#pragma once

#include "saelab/datagen.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/sae.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("saelab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline saelab::Cohort small_cohort(int n = 120, std::uint64_t seed = 3, bool markers = false) {
  saelab::CohortConfig cc;
  cc.n_patients = n;
  cc.end_of_stay_markers = markers;
  cc.vocab = saelab::desk_vocab_config(markers);
  cc.planted = saelab::PlantedAssociationSpec{};
  return saelab::generate_cohort(cc, seed);
}

inline saelab::ModelWeights small_model(int vocab_size, std::uint64_t seed = 5) {
  saelab::ModelConfig mc;
  mc.vocab_size = vocab_size;
  mc.seed = seed;
  return saelab::init_toy_model(mc);
}

inline saelab::RowMatrixF random_rows(int n, int d, std::uint64_t seed, float scale = 1.0f) {
  saelab::Rng rng(seed);
  std::normal_distribution<float> g(0.0f, scale);
  saelab::RowMatrixF m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = g(rng);
  return m;
}

}  // namespace testutil
