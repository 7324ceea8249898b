#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "pmx/training.hpp"

namespace pmx::test {

/// Small, well-separated cohort for fast training tests.
inline DatasetSplit small_split(std::uint64_t seed, std::size_t n = 360, std::size_t dim = 24, double sep = 6.0) {
  SynthConfig sc;
  sc.n_cases = n;
  sc.embedding_dim = dim;
  sc.embedding_separation = sep;
  sc.seed = seed;
  auto cases = generate_synthetic(sc);
  return split_dataset(cases, seed);
}

inline TrainConfig small_config(std::uint64_t seed, std::size_t dim = 24) {
  TrainConfig c;
  c.seed = seed;
  c.embedding_dim = dim;
  c.max_epochs = 12;
  c.patience = 5;
  c.batch_size = 32;
  return c;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("pmx_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

} // namespace pmx::test
