#pragma once

// Seeded randomness. Every stage derives its own stream from the root seed by
// hashing a component name: derive_seed(root, "train-dm") and so on, so any
// single stage can be rerun in isolation with identical draws.

#include <cstdint>
#include <random>
#include <string_view>

#include "diti/tensor.hpp"

namespace diti {

std::uint64_t fnv1a64(std::string_view text);
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::string_view component);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double gaussian() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  Tensor gaussian_tensor(Shape shape);
  Tensor uniform_tensor(Shape shape, float lo, float hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace diti
