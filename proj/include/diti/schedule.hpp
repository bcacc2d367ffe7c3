#pragma once

// Variance schedule of the forward diffusion process and every scalar derived
// from it. Time-steps are 1-based: t = 1..T. alpha_bar(0) is defined as 1 so
// that the posterior and the final DDIM step are well defined.

#include <iosfwd>
#include <span>
#include <vector>

namespace diti {

struct Posterior {
  double coef_x0;  // weight of x_0 in the posterior mean
  double coef_xt;  // weight of x_t in the posterior mean
  double var;      // posterior variance
};

class VarianceSchedule {
 public:
  /// Betas linearly spaced from beta_start to beta_end inclusive.
  static VarianceSchedule linear(int steps, double beta_start, double beta_end);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  /// Cumulative product of alphas; t = 0 gives 1.
  double alpha_bar(int t) const;
  double snr(int t) const { return snr_[index(t)]; }

  /// Epsilon-space time-step weight (1/(1+SNR))^0.9 (SNR/(1+SNR))^0.1.
  double lambda_p(int t) const { return lambda_p_[index(t)]; }
  /// Epsilon-space compensation strength, w_t * sqrt(abar_t) / sqrt(1 - abar_t).
  double w_p(int t) const { return w_p_[index(t)]; }
  /// x0-space time-step weight SNR(t) * lambda_p(t).
  double lambda(int t) const { return lambda_[index(t)]; }
  /// x0-space compensation strength sqrt(alpha_t / abar_t) * (1 - abar_t).
  double w(int t) const { return w_[index(t)]; }
  /// The shift coefficient sqrt(alpha_t)(1 - abar_{t-1}) / sqrt(1 - abar_t) as
  /// used by the epsilon-space autoencoder objective this weighting comes from.
  double pdae_shift_printed(int t) const;

  Posterior posterior(int t) const;

  std::span<const double> betas() const { return beta_; }

 private:
  VarianceSchedule() = default;
  std::size_t index(int t) const;

  std::vector<double> beta_, alpha_bar_, snr_, lambda_p_, w_p_, lambda_, w_;
};

VarianceSchedule make_linear_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);

struct PdaeWeights {
  std::vector<double> lambda_p, w_p, lambda, w;
};
PdaeWeights pdae_weights(const VarianceSchedule& s);

Posterior posterior(const VarianceSchedule& s, int t);

/// CSV with header `t,beta,alpha_bar,snr,lambda,w`.
void write_schedule_csv(std::ostream& out, const VarianceSchedule& s);

}  // namespace diti
