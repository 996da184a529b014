#pragma once

// Trained detectors shared by the slower tests. A model is trained once and
// cached under RAD_FIXTURE_DIR (set by CMake to <build>/fixtures).

#include <cstdlib>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "rad/corpus/corpus.hpp"
#include "rad/toynet/train.hpp"
#include "rad/toynet/weights_io.hpp"

namespace rad::testing {

inline constexpr std::uint64_t kTrainCorpusSeed = 11;
inline constexpr std::size_t kTrainCorpusSize = 2000;
inline constexpr std::size_t kClasses = 4;

inline std::filesystem::path fixture_dir() {
  if (const char* env = std::getenv("RAD_FIXTURE_DIR")) return env;
#ifdef RAD_DEFAULT_FIXTURE_DIR
  return RAD_DEFAULT_FIXTURE_DIR;
#else
  return std::filesystem::temp_directory_path() / "rad_fixtures";
#endif
}

inline const std::vector<corpus::Sample>& training_corpus() {
  static const std::vector<corpus::Sample> data = [] {
    std::vector<corpus::Sample> out;
    out.reserve(kTrainCorpusSize);
    for (std::size_t i = 0; i < kTrainCorpusSize; ++i)
      out.push_back(corpus::generate_sample(kTrainCorpusSeed, i, kClasses));
    return out;
  }();
  return data;
}

inline std::vector<corpus::Sample> test_split(std::uint64_t seed, std::size_t count) {
  std::vector<corpus::Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(corpus::generate_sample(seed, i, kClasses));
  return out;
}

// Default training config, initialised from `seed`.
inline toynet::Model trained_model(toynet::Arch arch, std::uint64_t seed = 1) {
  namespace fs = std::filesystem;
  const fs::path dir = fixture_dir();
  const fs::path path = dir / (std::string("model_") + toynet::arch_char(arch) + "_s" + std::to_string(seed) + ".bin");
  if (fs::exists(path)) return toynet::load_model(path);
  fs::create_directories(dir);
  toynet::TrainConfig cfg;
  cfg.seed = seed;
  const auto result = toynet::train(toynet::build_detector(arch, kClasses, seed), training_corpus(), cfg);
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  toynet::save_model(tmp, result.model);
  fs::rename(tmp, path);
  return result.model;
}

}  // namespace rad::testing
