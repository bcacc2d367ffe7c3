#pragma once

// Attribute loss under the forward process.
//
// Two clean samples x0, y0 that differ by a distance delta are noised to
// N(sqrt(abar_t) x0, (1 - abar_t) I) and N(sqrt(abar_t) y0, (1 - abar_t) I).
// Err is the error rate of the Bayes-optimal reconstructor that must tell
// them apart, i.e. half the overlapping coefficient of the two Gaussians:
//
//   Err = 1/2 [1 - erf(sqrt(abar_t) delta / (2 sqrt(2 (1 - abar_t))))]
//
// An attribute is lost with degree tau at t when the dataset average of Err
// over interventions on that attribute reaches tau.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "diti/schedule.hpp"
#include "diti/tensor.hpp"

namespace diti {

struct AttributeLossQuery {
  double delta_norm = 0.0;
  int t = 1;
  const VarianceSchedule* schedule = nullptr;
};

struct LossTimeQuery {
  double tau = 0.1;
  std::vector<double> delta_norms;
};

/// Err for a given distance and signal level abar in (0, 1].
double err_from_alpha_bar(double delta_norm, double alpha_bar);
double err_closed_form(const AttributeLossQuery& q);

/// Monte-Carlo estimate of Err: ceil(n/2) draws around x0 and floor(n/2)
/// around y0, each classified by the nearer noised mean (exact ties are a
/// fair coin). Returns the misclassification rate. Work is split into
/// fixed-size chunks with derived seeds, so the result does not depend on
/// the thread count.
double ovl_monte_carlo(const Tensor& x0, const Tensor& y0, int t, const VarianceSchedule& s, std::int64_t n,
                       std::uint64_t seed);

/// Three-sigma binomial half-width sqrt(p (1 - p) / n) * 3.
double binomial_halfwidth(double p, std::int64_t n, double sigmas = 3.0);

double mean_err_over_dataset(const LossTimeQuery& q, int t, const VarianceSchedule& s);

/// Smallest t with mean Err >= tau (binary search; mean Err is increasing in
/// t). Empty when the attribute is still not lost at t = T.
std::optional<int> find_loss_time(const LossTimeQuery& q, const VarianceSchedule& s);

/// True when the empirical CDF of `a` is <= that of `b` everywhere and < somewhere.
bool stochastic_dominance(std::span<const double> a, std::span<const double> b);

/// Checks that the coarser attribute is lost strictly later. A missing loss
/// time counts as T + 1. Requires stochastic_dominance(coarse, fine).
bool verify_theorem2(std::span<const double> deltas_coarse, std::span<const double> deltas_fine, double tau,
                     const VarianceSchedule& s);

}  // namespace diti
