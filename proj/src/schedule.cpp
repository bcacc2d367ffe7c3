#include "diti/schedule.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

#include "diti/error.hpp"

namespace diti {

VarianceSchedule VarianceSchedule::linear(int steps, double beta_start, double beta_end) {
  require(steps >= 2, "schedule: need at least 2 time-steps, got " + std::to_string(steps));
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "schedule: require 0 < beta_start <= beta_end < 1");
  VarianceSchedule s;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    s.beta_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(n - 1);

  s.alpha_bar_.resize(n);
  s.snr_.resize(n);
  s.lambda_p_.resize(n);
  s.w_p_.resize(n);
  s.lambda_.resize(n);
  s.w_.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double alpha = 1.0 - s.beta_[i];
    prod *= alpha;
    const double abar = prod;
    const double snr = abar / (1.0 - abar);
    s.alpha_bar_[i] = abar;
    s.snr_[i] = snr;
    s.lambda_p_[i] = std::pow(1.0 / (1.0 + snr), 0.9) * std::pow(snr / (1.0 + snr), 0.1);
    s.lambda_[i] = snr * s.lambda_p_[i];
    s.w_[i] = std::sqrt(alpha / abar) * (1.0 - abar);
    s.w_p_[i] = s.w_[i] * std::sqrt(abar) / std::sqrt(1.0 - abar);
  }
  return s;
}

std::size_t VarianceSchedule::index(int t) const {
  if (t < 1 || t > steps())
    throw ContractError("time-step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  return static_cast<std::size_t>(t - 1);
}

double VarianceSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bar_[index(t)];
}

double VarianceSchedule::pdae_shift_printed(int t) const {
  return std::sqrt(alpha(t)) * (1.0 - alpha_bar(t - 1)) / std::sqrt(1.0 - alpha_bar(t));
}

Posterior VarianceSchedule::posterior(int t) const {
  const double b = beta(t);
  const double abar = alpha_bar(t);
  const double abar_prev = alpha_bar(t - 1);
  return {std::sqrt(abar_prev) * b / (1.0 - abar), std::sqrt(alpha(t)) * (1.0 - abar_prev) / (1.0 - abar),
          (1.0 - abar_prev) * b / (1.0 - abar)};
}

VarianceSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  return VarianceSchedule::linear(steps, beta_start, beta_end);
}

PdaeWeights pdae_weights(const VarianceSchedule& s) {
  PdaeWeights out;
  for (int t = 1; t <= s.steps(); ++t) {
    out.lambda_p.push_back(s.lambda_p(t));
    out.w_p.push_back(s.w_p(t));
    out.lambda.push_back(s.lambda(t));
    out.w.push_back(s.w(t));
  }
  return out;
}

Posterior posterior(const VarianceSchedule& s, int t) { return s.posterior(t); }

void write_schedule_csv(std::ostream& out, const VarianceSchedule& s) {
  out << "t,beta,alpha_bar,snr,lambda,w\n";
  out << std::setprecision(17);
  for (int t = 1; t <= s.steps(); ++t)
    out << t << ',' << s.beta(t) << ',' << s.alpha_bar(t) << ',' << s.snr(t) << ',' << s.lambda(t) << ','
        << s.w(t) << '\n';
}

}  // namespace diti
