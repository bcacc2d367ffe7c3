#pragma once

// Small building blocks for the MLP networks: affine layers, multilayer
// perceptrons, sinusoidal time embeddings and the Adam optimiser.

#include <span>
#include <string>
#include <vector>

#include "diti/random.hpp"
#include "diti/tensor.hpp"

namespace diti {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

/// y = x W + b, with b stored as the last row of an (in + 1) x out weight.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);

  Tensor forward(const Tensor& x) const;
  std::size_t in_features() const { return weight_.dim(0) - 1; }
  std::size_t out_features() const { return weight_.dim(1); }
  const Tensor& weight() const { return weight_; }
  Tensor& weight() { return weight_; }

 private:
  Tensor weight_;
};

/// Linear -> LayerNorm -> SiLU for each hidden width, then a final Linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng,
      bool zero_last = false);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t in_features() const { return layers_.front().in_features(); }
  std::size_t out_features() const { return layers_.back().out_features(); }

 private:
  std::vector<Linear> layers_;
};

inline constexpr std::size_t kTimeEmbeddingDim = 64;

/// Rows of [sin(t w_i), cos(t w_i)] with w_i = 10000^(-i / (dim/2)).
Tensor time_embedding(std::span<const int> ts, std::size_t dim = kTimeEmbeddingDim);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);
  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  long steps() const { return t_; }
  void set_learning_rate(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

std::vector<Tensor> tensors_of(const ParameterList& list);

/// Cosine decay from `base` at step 0 to `floor_frac * base` at `total`.
double cosine_lr(double base, int step, int total, double floor_frac = 0.05);

/// Row-major [rows x cols] constant whose row r is filled with per_row[r].
Tensor row_constant(std::span<const float> per_row, std::size_t cols);

}  // namespace diti
