#include "diti/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "diti/error.hpp"
#include "diti/random.hpp"
#include "diti/theory.hpp"

namespace diti {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_matrix(std::vector<double> v, std::size_t rows, std::size_t cols) {
  return Eigen::Map<MatD>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::vector<int> binarize(std::span<const double> y, double threshold) {
  std::vector<int> out;
  for (double v : y) out.push_back(v >= threshold ? 1 : 0);
  return out;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "average_precision: length mismatch");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  require(positives > 0, "average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double acc = 0.0;
  long hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] == 1) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return acc / static_cast<double>(positives);
}

double pearson_r(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "pearson_r: length mismatch");
  require(a.size() >= 2, "pearson_r: need at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  require(saa > 0.0 && sbb > 0.0, "pearson_r: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), "mean_squared_error: length mismatch or empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson_r(ra, rb);
}

double spearman_permutation_p(std::span<const double> a, std::span<const double> b, int shuffles,
                              std::uint64_t seed) {
  const double observed = spearman_rho(a, b);
  const double slack = 1e-12;
  std::vector<double> perm(a.begin(), a.end());
  if (perm.size() <= 6) {
    std::vector<std::size_t> idx(perm.size());
    std::iota(idx.begin(), idx.end(), 0);
    long total = 0, extreme = 0;
    do {
      for (std::size_t i = 0; i < idx.size(); ++i) perm[i] = a[idx[i]];
      ++total;
      // A permutation with a constant vector has undefined correlation and
      // cannot be as extreme as the observed value.
      bool constant = std::adjacent_find(perm.begin(), perm.end(), std::not_equal_to<>()) == perm.end();
      if (!constant && spearman_rho(perm, b) >= observed - slack) ++extreme;
    } while (std::next_permutation(idx.begin(), idx.end()));
    return static_cast<double>(extreme) / static_cast<double>(total);
  }
  require(shuffles >= 1, "spearman_permutation_p: need at least one shuffle");
  Rng rng(seed);
  long extreme = 0;
  for (int s = 0; s < shuffles; ++s) {
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    if (spearman_rho(perm, b) >= observed - slack) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(shuffles + 1);
}

double ProbeResult::mean_ap() const {
  double acc = 0.0;
  int n = 0;
  for (const auto& a : attributes)
    if (!a.skipped) {
      acc += a.ap;
      ++n;
    }
  return n ? acc / n : 0.0;
}

Standardizer Standardizer::fit(const Tensor& x) {
  require(x.rank() == 2 && x.dim(0) >= 1, "standardizer: expected a non-empty matrix");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Standardizer s;
  s.mean.assign(cols, 0.0);
  s.scale.assign(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) s.mean[c] += x.at(r * cols + c);
  for (auto& m : s.mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double d = x.at(r * cols + c) - s.mean[c];
      s.scale[c] += d * d;
    }
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(rows));
    if (v < 1e-12) v = 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(const Tensor& x) const {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(cols == mean.size(), "standardizer: column count mismatch");
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (x.at(r * cols + c) - mean[c]) / scale[c];
  return out;
}

namespace {

struct LinearFit {
  Eigen::VectorXd w;
  double b = 0.0;
};

LinearFit fit_logistic(const MatD& x, const Eigen::VectorXd& y, const ProbeConfig& cfg) {
  const auto n = static_cast<double>(x.rows());
  LinearFit f{Eigen::VectorXd::Zero(x.cols()), 0.0};
  for (int it = 0; it < cfg.iterations; ++it) {
    Eigen::VectorXd z = x * f.w;
    Eigen::VectorXd resid(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) resid[i] = sigmoid(z[i] + f.b) - y[i];
    Eigen::VectorXd gw = x.transpose() * resid / n + cfg.l2 * f.w;
    f.w -= cfg.learning_rate * gw;
    f.b -= cfg.learning_rate * resid.sum() / n;
  }
  return f;
}

LinearFit fit_least_squares(const MatD& x, const Eigen::VectorXd& y, double ridge) {
  const double ybar = y.mean();
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += ridge * static_cast<double>(x.rows());
  Eigen::VectorXd rhs = x.transpose() * (y.array() - ybar).matrix();
  return {gram.ldlt().solve(rhs), ybar};
}

}  // namespace

ProbeResult linear_probe(const Tensor& train_x, const std::vector<std::vector<double>>& train_targets,
                         const Tensor& test_x, const std::vector<std::vector<double>>& test_targets,
                         const std::vector<std::string>& names, ProbeTask task, const ProbeConfig& cfg) {
  require(train_x.rank() == 2 && test_x.rank() == 2 && train_x.dim(1) == test_x.dim(1),
          "linear_probe: feature matrices must be rank 2 with equal widths");
  require(train_targets.size() == test_targets.size() && names.size() == train_targets.size(),
          "linear_probe: attribute counts differ");
  auto stdz = Standardizer::fit(train_x);
  const MatD xtr = to_matrix(stdz.apply(train_x), train_x.dim(0), train_x.dim(1));
  const MatD xte = to_matrix(stdz.apply(test_x), test_x.dim(0), test_x.dim(1));
  ProbeResult result;
  for (std::size_t a = 0; a < names.size(); ++a) {
    AttributeProbe p;
    p.name = names[a];
    const auto& ytr = train_targets[a];
    const auto& yte = test_targets[a];
    require(ytr.size() == train_x.dim(0) && yte.size() == test_x.dim(0), "linear_probe: target length mismatch");
    auto ltr = binarize(ytr, cfg.label_threshold), lte = binarize(yte, cfg.label_threshold);
    const auto pos_tr = std::count(ltr.begin(), ltr.end(), 1);
    const auto pos_te = std::count(lte.begin(), lte.end(), 1);
    const bool const_tr = std::adjacent_find(ytr.begin(), ytr.end(), std::not_equal_to<>()) == ytr.end();
    const bool const_te = std::adjacent_find(yte.begin(), yte.end(), std::not_equal_to<>()) == yte.end();
    if (pos_tr == 0 || pos_tr == static_cast<long>(ltr.size()) || pos_te == 0 ||
        pos_te == static_cast<long>(lte.size()) || const_tr || const_te) {
      p.skipped = true;
      p.warning = "attribute '" + p.name + "' has a single class or constant target in a split; skipped";
      result.attributes.push_back(std::move(p));
      continue;
    }
    std::vector<double> score(yte.size()), pred(yte.size());
    LinearFit fit;
    if (task == ProbeTask::Classify) {
      Eigen::VectorXd y(ltr.size());
      for (std::size_t i = 0; i < ltr.size(); ++i) y[static_cast<Eigen::Index>(i)] = ltr[i];
      fit = fit_logistic(xtr, y, cfg);
      Eigen::VectorXd z = xte * fit.w;
      for (std::size_t i = 0; i < score.size(); ++i) {
        score[i] = z[static_cast<Eigen::Index>(i)] + fit.b;
        pred[i] = sigmoid(score[i]);
      }
      std::vector<double> lab(lte.begin(), lte.end());
      p.pearson_r = pearson_r(pred, lab);
      p.mse = mean_squared_error(pred, lab);
    } else {
      Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ytr.data(), static_cast<Eigen::Index>(ytr.size()));
      fit = fit_least_squares(xtr, y, 1e-6 + cfg.l2);
      Eigen::VectorXd z = xte * fit.w;
      for (std::size_t i = 0; i < score.size(); ++i) score[i] = pred[i] = z[static_cast<Eigen::Index>(i)] + fit.b;
      bool constant = std::adjacent_find(pred.begin(), pred.end(), std::not_equal_to<>()) == pred.end();
      p.pearson_r = constant ? 0.0 : pearson_r(pred, yte);
      p.mse = mean_squared_error(pred, yte);
    }
    p.ap = average_precision(score, lte);
    p.weights.assign(fit.w.data(), fit.w.data() + fit.w.size());
    p.bias = fit.b;
    result.attributes.push_back(std::move(p));
  }
  return result;
}

std::vector<std::vector<double>> factor_columns(const std::vector<FactorRecord>& records,
                                                std::span<const std::size_t> rows) {
  require(!records.empty(), "factor_columns: no records");
  std::vector<std::vector<double>> out(records.front().factors.size());
  for (auto r : rows)
    for (std::size_t i = 0; i < out.size(); ++i) out[i].push_back(records.at(r).factors[i]);
  return out;
}

std::vector<HistogramBin> histogram(std::span<const double> values, int bins) {
  require(bins >= 1 && !values.empty(), "histogram: need values and at least one bin");
  auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  double lo = *mn, hi = *mx;
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / bins;
  std::vector<HistogramBin> out;
  for (int b = 0; b < bins; ++b) out.push_back({lo + b * width, b + 1 == bins ? hi : lo + (b + 1) * width, 0});
  for (double v : values) {
    auto b = static_cast<int>((v - lo) / width);
    ++out[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))].count;
  }
  return out;
}

double heldout_r2(const Tensor& train_x, std::span<const double> train_y, const Tensor& test_x,
                  std::span<const double> test_y) {
  auto stdz = Standardizer::fit(train_x);
  const MatD xtr = to_matrix(stdz.apply(train_x), train_x.dim(0), train_x.dim(1));
  const MatD xte = to_matrix(stdz.apply(test_x), test_x.dim(0), test_x.dim(1));
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(train_y.data(), static_cast<Eigen::Index>(train_y.size()));
  auto fit = fit_least_squares(xtr, y, 1e-6);
  Eigen::VectorXd pred = (xte * fit.w).array() + fit.b;
  const double mean = std::accumulate(test_y.begin(), test_y.end(), 0.0) / static_cast<double>(test_y.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    sse += (test_y[i] - pred[static_cast<Eigen::Index>(i)]) * (test_y[i] - pred[static_cast<Eigen::Index>(i)]);
    sst += (test_y[i] - mean) * (test_y[i] - mean);
  }
  if (sst <= 0.0) return 0.0;
  return std::clamp(1.0 - sse / sst, 0.0, 1.0);
}

Alignment subset_alignment(const Tensor& features, const PartitionSpec& spec, const std::vector<FactorRecord>& records,
                           std::span<const std::size_t> train, std::span<const std::size_t> test) {
  require(features.rank() == 2 && features.dim(1) == static_cast<std::size_t>(spec.d),
          "subset_alignment: features must be [N x d]");
  require(features.dim(0) == records.size(), "subset_alignment: one record per feature row required");
  auto ytr = factor_columns(records, train), yte = factor_columns(records, test);
  Tensor ftr = gather_rows(features, train), fte = gather_rows(features, test);
  Alignment out;
  out.r2.assign(static_cast<std::size_t>(spec.k), std::vector<double>(ytr.size(), 0.0));
  for (int j = 1; j <= spec.k; ++j) {
    const auto lo = static_cast<std::size_t>(spec.dim_offset(j));
    const auto hi = lo + static_cast<std::size_t>(spec.subset_dims[static_cast<std::size_t>(j - 1)]);
    Tensor str = slice(ftr, lo, hi), ste = slice(fte, lo, hi);
    for (std::size_t i = 0; i < ytr.size(); ++i)
      out.r2[static_cast<std::size_t>(j - 1)][i] = heldout_r2(str, ytr[i], ste, yte[i]);
  }
  for (std::size_t i = 0; i < ytr.size(); ++i) {
    int best = 1;
    for (int j = 2; j <= spec.k; ++j)
      if (out.r2[static_cast<std::size_t>(j - 1)][i] > out.r2[static_cast<std::size_t>(best - 1)][i]) best = j;
    out.best_subset.push_back(best);
  }
  return out;
}

std::vector<std::optional<int>> loss_time_subsets(const PartitionSpec& spec,
                                                  const std::vector<std::vector<double>>& deltas,
                                                  const VarianceSchedule& s, double tau) {
  require(s.steps() == spec.T, "loss_time_subsets: schedule and partition disagree on T");
  std::vector<std::optional<int>> out;
  for (const auto& d : deltas) {
    auto t = find_loss_time({tau, d}, s);
    out.push_back(t ? std::optional<int>(subset_of(spec, *t)) : std::nullopt);
  }
  return out;
}

void write_probe_csv(std::ostream& out, const ProbeResult& r) {
  out << "attribute,ap,pearson_r,mse\n" << std::setprecision(10);
  for (const auto& a : r.attributes) {
    if (a.skipped)
      out << a.name << ",nan,nan,nan\n";
    else
      out << a.name << ',' << a.ap << ',' << a.pearson_r << ',' << a.mse << '\n';
  }
}

void write_histogram_csv(std::ostream& out, std::span<const HistogramBin> bins) {
  out << "bin_lo,bin_hi,count\n" << std::setprecision(10);
  for (const auto& b : bins) out << b.lo << ',' << b.hi << ',' << b.count << '\n';
}

}  // namespace diti
