#pragma once

// Counterfactual generation by subset interpolation and attribute
// manipulation along a sparse classifier's normal.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "diti/ddpm.hpp"
#include "diti/diti.hpp"

namespace diti {

/// Spherical interpolation of the flattened tensors; linear when the angle is
/// below 1e-4 rad.
Tensor slerp(const Tensor& a, const Tensor& b, double lam);
/// slerp applied to each row pair of two [B x P] batches.
Tensor slerp_rows(const Tensor& a, const Tensor& b, double lam);

/// Dims of the chosen 1-based subsets become (1 - lam) z + lam z'; every other
/// dim is copied from z.
Tensor lerp_subset(const Tensor& z, const Tensor& z_other, std::span<const int> subsets, const PartitionSpec& spec,
                   double lam);

struct Models {
  const X0Predictor& dm;
  const EncoderDecoder& ed;
};

/// Guided inversion followed by guided sampling with the image's own code.
Tensor reconstruct(const Models& m, const Tensor& x0, std::span<const int> seq);

/// Row-wise counterfactuals x0 -> x0' on the given subsets with scale lam.
Tensor counterfactual(const Models& m, const Tensor& x0, const Tensor& x0_other, std::span<const int> subsets,
                      double lam, std::span<const int> seq);

struct SparseClassifier {
  std::vector<double> w;  // in raw feature units; exactly zero off the mask
  double bias = 0.0;
  std::vector<bool> active;
  int budget = 0;

  double logit(std::span<const float> z) const;
  std::size_t zero_count() const;
};

struct SparseConfig {
  int iterations = 1000;  // gradient steps per (re)training round
  double learning_rate = 0.5;
  int prune_rounds = 4;
};

/// Logistic regression, then iterative magnitude pruning down to `budget`
/// active dims with retraining after every round. Throws TrainingError when
/// all labels agree.
SparseClassifier train_sparse_classifier(const Tensor& features, std::span<const int> labels, int budget,
                                         const SparseConfig& cfg = {});

struct FeatureStats {
  std::vector<double> sigma;
};
FeatureStats feature_stats(const Tensor& features);

/// z' = z + lam (sigma * w) / ||w||, decoded through the guided sampler.
Tensor manipulate(const Models& m, const Tensor& x0, const SparseClassifier& clf, const FeatureStats& stats,
                  double lam, std::span<const int> seq);

/// Share of the squared change that falls inside `mask`, per row.
std::vector<double> mask_energy_fraction(const Tensor& before, const Tensor& after, const std::vector<bool>& mask);

/// Binary PGM (P5) grid of [n x side*side] images in [-1, 1].
void write_pgm_grid(const std::filesystem::path& path, const Tensor& images, int side, int columns);

}  // namespace diti
