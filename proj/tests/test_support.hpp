#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "dpruner/importance.hpp"
#include "dpruner/model.hpp"
#include "dpruner/random.hpp"

namespace dpruner::testing {

inline std::filesystem::path data_dir() { return DPRUNER_DATA_DIR; }

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("dpruner_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small enough for exhaustive finite-difference checks.
inline ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.context_length = 16;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 12;
  c.seed = seed;
  return c;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = scale * standard_normal(rng);
  return t;
}

inline std::vector<TokenId> random_tokens(std::size_t n, Rng& rng, std::size_t vocab = 256) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(uniform_index(rng, vocab));
  return out;
}

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Corpus corpus_of(std::vector<std::vector<TokenId>> sequences, std::string name = "test") {
  Corpus c;
  c.name = std::move(name);
  c.sequences = std::move(sequences);
  return c;
}

inline MatrixSet random_scores(const std::vector<Shape>& shapes, Rng& rng) {
  MatrixSet set;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    MatrixKey key{i / kProjections.size(), kProjections[i % kProjections.size()]};
    Tensor t(shapes[i]);
    for (auto& v : t.data()) v = uniform01(rng);
    set.push_back({key, std::move(t)});
  }
  return set;
}

}  // namespace dpruner::testing
