#include "diti/theory.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "diti/error.hpp"
#include "diti/random.hpp"

namespace diti {

namespace {

constexpr std::int64_t kChunk = 1 << 15;

// Misclassifications among the draws [begin, end) of one side.
std::int64_t count_errors(std::span<const double> own_mean, std::span<const double> other_mean, double sigma,
                          std::int64_t count, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t dim = own_mean.size();
  std::int64_t errors = 0;
  for (std::int64_t k = 0; k < count; ++k) {
    double d_own = 0.0, d_other = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double x = own_mean[i] + sigma * rng.gaussian();
      d_own += (x - own_mean[i]) * (x - own_mean[i]);
      d_other += (x - other_mean[i]) * (x - other_mean[i]);
    }
    if (d_other < d_own)
      ++errors;
    else if (d_other == d_own && rng.uniform() < 0.5)
      ++errors;
  }
  return errors;
}

}  // namespace

double err_from_alpha_bar(double delta_norm, double alpha_bar) {
  require(delta_norm >= 0.0, "attribute loss: delta_norm must be nonnegative");
  require(alpha_bar > 0.0 && alpha_bar <= 1.0, "attribute loss: alpha_bar must lie in (0, 1]");
  if (delta_norm == 0.0) return 0.5;
  if (alpha_bar == 1.0) return 0.0;
  const double arg = std::sqrt(alpha_bar) * delta_norm / (2.0 * std::sqrt(2.0 * (1.0 - alpha_bar)));
  return 0.5 * std::erfc(arg);
}

double err_closed_form(const AttributeLossQuery& q) {
  require(q.schedule != nullptr, "attribute loss: schedule missing");
  return err_from_alpha_bar(q.delta_norm, q.schedule->alpha_bar(q.t));
}

double ovl_monte_carlo(const Tensor& x0, const Tensor& y0, int t, const VarianceSchedule& s, std::int64_t n,
                       std::uint64_t seed) {
  require(x0.numel() == y0.numel(), "ovl_monte_carlo: x0 and y0 differ in size");
  require(n >= 1, "ovl_monte_carlo: need at least one sample");
  const double abar = s.alpha_bar(t);
  const double sigma = std::sqrt(1.0 - abar);
  std::vector<double> mx(x0.numel()), my(y0.numel());
  for (std::size_t i = 0; i < mx.size(); ++i) {
    mx[i] = std::sqrt(abar) * x0.at(i);
    my[i] = std::sqrt(abar) * y0.at(i);
  }

  const std::int64_t nx = (n + 1) / 2;
  const std::int64_t ny = n / 2;
  struct Job {
    bool x_side;
    std::int64_t count;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::int64_t start = 0, c = 0; start < nx; start += kChunk, ++c)
    jobs.push_back({true, std::min(kChunk, nx - start), derive_seed(derive_seed(seed, "x"), c)});
  for (std::int64_t start = 0, c = 0; start < ny; start += kChunk, ++c)
    jobs.push_back({false, std::min(kChunk, ny - start), derive_seed(derive_seed(seed, "y"), c)});

  std::vector<std::int64_t> errors(jobs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      const auto& job = jobs[j];
      errors[j] = job.x_side ? count_errors(mx, my, sigma, job.count, job.seed)
                             : count_errors(my, mx, sigma, job.count, job.seed);
    }
  };
  unsigned threads = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 16u));
  if (const char* env = std::getenv("DITI_THREADS")) threads = static_cast<unsigned>(std::max(1, std::atoi(env)));
  if (threads == 1 || jobs.size() == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
  }
  std::int64_t total = 0;
  for (auto e : errors) total += e;
  return static_cast<double>(total) / static_cast<double>(n);
}

double binomial_halfwidth(double p, std::int64_t n, double sigmas) {
  return sigmas * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

double mean_err_over_dataset(const LossTimeQuery& q, int t, const VarianceSchedule& s) {
  require(!q.delta_norms.empty(), "mean_err_over_dataset: empty dataset");
  const double abar = s.alpha_bar(t);
  double acc = 0.0;
  for (double d : q.delta_norms) acc += err_from_alpha_bar(d, abar);
  return acc / static_cast<double>(q.delta_norms.size());
}

std::optional<int> find_loss_time(const LossTimeQuery& q, const VarianceSchedule& s) {
  require(q.tau > 0.0 && q.tau <= 0.5, "find_loss_time: tau must lie in (0, 0.5]");
  const int T = s.steps();
  if (mean_err_over_dataset(q, T, s) < q.tau) return std::nullopt;
  int lo = 1, hi = T;  // invariant: answer in [lo, hi]
  while (lo < hi) {
    int mid = lo + (hi - lo) / 2;
    if (mean_err_over_dataset(q, mid, s) >= q.tau)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

bool stochastic_dominance(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "stochastic_dominance: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<double> points;
  points.reserve(sa.size() + sb.size());
  points.insert(points.end(), sa.begin(), sa.end());
  points.insert(points.end(), sb.begin(), sb.end());
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());

  // Empirical CDFs are right-continuous step functions that only change at
  // sample points, so comparing at every point decides the order.
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  bool strict = false;
  for (double x : points) {
    auto ca = static_cast<double>(std::upper_bound(sa.begin(), sa.end(), x) - sa.begin());
    auto cb = static_cast<double>(std::upper_bound(sb.begin(), sb.end(), x) - sb.begin());
    // Compare ca/na with cb/nb without rounding.
    double lhs = ca * nb, rhs = cb * na;
    if (lhs > rhs) return false;
    if (lhs < rhs) strict = true;
  }
  return strict;
}

bool verify_theorem2(std::span<const double> deltas_coarse, std::span<const double> deltas_fine, double tau,
                     const VarianceSchedule& s) {
  require(stochastic_dominance(deltas_coarse, deltas_fine),
          "verify_theorem2: coarse deltas do not stochastically dominate fine deltas");
  const int none = s.steps() + 1;
  LossTimeQuery coarse{tau, {deltas_coarse.begin(), deltas_coarse.end()}};
  LossTimeQuery fine{tau, {deltas_fine.begin(), deltas_fine.end()}};
  return find_loss_time(coarse, s).value_or(none) > find_loss_time(fine, s).value_or(none);
}

}  // namespace diti
