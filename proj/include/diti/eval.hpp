#pragma once

// Linear-probe metrics and subset/attribute alignment diagnostics.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diti/diti.hpp"
#include "diti/schedule.hpp"
#include "diti/synth.hpp"
#include "diti/tensor.hpp"

namespace diti {

/// Mean of precision@rank over the positives, ranking by descending score
/// (ties keep the input order).
double average_precision(std::span<const double> scores, std::span<const int> labels);
double pearson_r(std::span<const double> a, std::span<const double> b);
double mean_squared_error(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of average ranks.
double spearman_rho(std::span<const double> a, std::span<const double> b);

/// One-sided permutation p-value for spearman_rho(a, b) >= observed: exact
/// enumeration when a has at most 6 entries, otherwise `shuffles` random
/// permutations with the (count + 1) / (shuffles + 1) estimate.
double spearman_permutation_p(std::span<const double> a, std::span<const double> b, int shuffles,
                              std::uint64_t seed);

enum class ProbeTask { Classify, Regress };

struct ProbeConfig {
  int iterations = 2000;  // gradient steps for the logistic model
  double learning_rate = 0.5;
  double l2 = 0.0;
  double label_threshold = 0.5;  // binary label = target >= threshold
};

struct AttributeProbe {
  std::string name;
  bool skipped = false;
  std::string warning;
  double ap = 0.0, pearson_r = 0.0, mse = 0.0;
  std::vector<double> weights;  // on standardised features
  double bias = 0.0;
};

struct ProbeResult {
  std::vector<AttributeProbe> attributes;
  double mean_ap() const;
};

/// Column standardisation fitted on one matrix and applied to others.
struct Standardizer {
  std::vector<double> mean, scale;
  static Standardizer fit(const Tensor& x);
  std::vector<double> apply(const Tensor& x) const;  // row-major doubles
};

/// targets[i][row] for attribute i. Classify fits a logistic model on the
/// binary labels (AP from the logit, r and MSE from the probability against
/// the label); Regress fits least squares on the raw targets (r and MSE on the
/// targets, AP from the prediction against the binary label). Degenerate
/// attributes are skipped with a warning.
ProbeResult linear_probe(const Tensor& train_x, const std::vector<std::vector<double>>& train_targets,
                         const Tensor& test_x, const std::vector<std::vector<double>>& test_targets,
                         const std::vector<std::string>& names, ProbeTask task, const ProbeConfig& cfg = {});

/// Factor columns of the given records: out[i][row].
std::vector<std::vector<double>> factor_columns(const std::vector<FactorRecord>& records,
                                                std::span<const std::size_t> rows);

struct HistogramBin {
  double lo, hi;
  std::size_t count;
};
std::vector<HistogramBin> histogram(std::span<const double> values, int bins);

/// Least-squares fit with a small ridge on standardised columns; returns
/// held-out R^2 clipped at 0.
double heldout_r2(const Tensor& train_x, std::span<const double> train_y, const Tensor& test_x,
                  std::span<const double> test_y);

struct Alignment {
  std::vector<std::vector<double>> r2;  // [subset][attribute], in [0, 1]
  std::vector<int> best_subset;         // 1-based, per attribute
};

/// Per-subset, per-attribute held-out R^2 of a linear regressor on that
/// subset's feature columns.
Alignment subset_alignment(const Tensor& features, const PartitionSpec& spec, const std::vector<FactorRecord>& records,
                           std::span<const std::size_t> train, std::span<const std::size_t> test);

/// Subset owning each attribute's loss time (none when not lost by T).
std::vector<std::optional<int>> loss_time_subsets(const PartitionSpec& spec,
                                                  const std::vector<std::vector<double>>& deltas,
                                                  const VarianceSchedule& s, double tau);

void write_probe_csv(std::ostream& out, const ProbeResult& r);
void write_histogram_csv(std::ostream& out, std::span<const HistogramBin> bins);

}  // namespace diti
