#include "diti/generate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "diti/error.hpp"
#include "diti/eval.hpp"

namespace diti {

namespace {

constexpr double kSlerpMinAngle = 1e-4;

void slerp_into(std::span<const float> a, std::span<const float> b, double lam, std::span<float> out) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  require(na > 0.0 && nb > 0.0, "slerp: zero vector");
  const double theta = std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
  double ca = 1.0 - lam, cb = lam;
  if (theta >= kSlerpMinAngle) {
    ca = std::sin((1.0 - lam) * theta) / std::sin(theta);
    cb = std::sin(lam * theta) / std::sin(theta);
  }
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(ca * a[i] + cb * b[i]);
}

Tensor guided(const Models& m, const Tensor& x, const Tensor& z, std::span<const int> seq, bool invert) {
  auto guide = make_guidance(m.dm.schedule(), m.ed, z);
  return invert ? ddim_invert(m.dm, x, seq, guide) : ddim_sample(m.dm, x, seq, guide);
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Full-batch logistic regression restricted to `active` columns, warm-started.
void fit_masked_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<bool>& active,
                         const SparseConfig& cfg, Eigen::VectorXd& w, double& b) {
  const auto n = static_cast<double>(x.rows());
  Eigen::VectorXd mask(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) mask[c] = active[static_cast<std::size_t>(c)] ? 1.0 : 0.0;
  w = w.cwiseProduct(mask);
  for (int it = 0; it < cfg.iterations; ++it) {
    Eigen::VectorXd z = x * w;
    Eigen::VectorXd r(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) r[i] = sigmoid(z[i] + b) - y[i];
    w -= cfg.learning_rate * (x.transpose() * r / n).cwiseProduct(mask);
    b -= cfg.learning_rate * r.sum() / n;
  }
}

}  // namespace

Tensor slerp(const Tensor& a, const Tensor& b, double lam) {
  require(a.shape() == b.shape(), "slerp: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out(a.shape());
  slerp_into(a.values(), b.values(), lam, out.mutable_values());
  return out;
}

Tensor slerp_rows(const Tensor& a, const Tensor& b, double lam) {
  require(a.shape() == b.shape() && a.rank() == 2, "slerp_rows: expected two [B x P] batches of equal shape");
  Tensor out(a.shape());
  const std::size_t cols = a.dim(1);
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < a.dim(0); ++r)
    slerp_into(a.values().subspan(r * cols, cols), b.values().subspan(r * cols, cols), lam, o.subspan(r * cols, cols));
  return out;
}

Tensor lerp_subset(const Tensor& z, const Tensor& z_other, std::span<const int> subsets, const PartitionSpec& spec,
                   double lam) {
  require(z.shape() == z_other.shape(), "lerp_subset: shape mismatch");
  require(z.numel() % static_cast<std::size_t>(spec.d) == 0 && z.shape().back() == static_cast<std::size_t>(spec.d),
          "lerp_subset: feature width must equal d = " + std::to_string(spec.d));
  require(!subsets.empty(), "lerp_subset: no subsets selected");
  std::vector<bool> selected(static_cast<std::size_t>(spec.d), false);
  for (int j : subsets) {
    const int lo = spec.dim_offset(j);  // validates j
    for (int c = lo; c < lo + spec.subset_dims[static_cast<std::size_t>(j - 1)]; ++c)
      selected[static_cast<std::size_t>(c)] = true;
  }
  Tensor out = z.clone();
  auto o = out.mutable_values();
  const auto d = static_cast<std::size_t>(spec.d);
  for (std::size_t i = 0; i < o.size(); ++i)
    if (selected[i % d])
      o[i] = static_cast<float>((1.0 - lam) * z.at(i) + lam * z_other.at(i));
  return out;
}

Tensor reconstruct(const Models& m, const Tensor& x0, std::span<const int> seq) {
  Tensor z = encode_all(m.ed, x0);
  return guided(m, guided(m, x0, z, seq, true), z, seq, false);
}

Tensor counterfactual(const Models& m, const Tensor& x0, const Tensor& x0_other, std::span<const int> subsets,
                      double lam, std::span<const int> seq) {
  require(x0.shape() == x0_other.shape(), "counterfactual: input batches differ in shape");
  Tensor z = encode_all(m.ed, x0), z_other = encode_all(m.ed, x0_other);
  Tensor xT = guided(m, x0, z, seq, true);
  Tensor xT_other = guided(m, x0_other, z_other, seq, true);
  Tensor z_s = lerp_subset(z, z_other, subsets, m.ed.partition(), lam);
  return guided(m, slerp_rows(xT, xT_other, lam), z_s, seq, false);
}

double SparseClassifier::logit(std::span<const float> z) const {
  require(z.size() == w.size(), "sparse classifier: feature width mismatch");
  double acc = bias;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * z[i];
  return acc;
}

std::size_t SparseClassifier::zero_count() const {
  return static_cast<std::size_t>(std::count(w.begin(), w.end(), 0.0));
}

SparseClassifier train_sparse_classifier(const Tensor& features, std::span<const int> labels, int budget,
                                         const SparseConfig& cfg) {
  require(features.rank() == 2 && features.dim(0) == labels.size(), "sparse classifier: one label per row required");
  const auto d = static_cast<int>(features.dim(1));
  require(budget >= 1 && budget <= d, "sparse classifier: budget must lie in [1, d]");
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size()))
    throw TrainingError("sparse classifier: labels are all " + std::string(pos ? "1" : "0"));

  auto stdz = Standardizer::fit(features);
  auto flat = stdz.apply(features);
  Eigen::MatrixXd x = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), static_cast<Eigen::Index>(features.dim(0)), d);
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i];

  std::vector<bool> active(static_cast<std::size_t>(d), true);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  fit_masked_logistic(x, y, active, cfg, w, b);
  // Geometric schedule of active counts from d down to the budget.
  const int rounds = budget < d ? std::max(1, cfg.prune_rounds) : 0;
  for (int r = 1; r <= rounds; ++r) {
    const double frac = static_cast<double>(r) / rounds;
    int keep = static_cast<int>(std::lround(d * std::pow(static_cast<double>(budget) / d, frac)));
    if (r == rounds) keep = budget;
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
      const bool aa = active[static_cast<std::size_t>(a)], ac = active[static_cast<std::size_t>(c)];
      if (aa != ac) return aa;
      return std::abs(w[a]) > std::abs(w[c]);
    });
    std::fill(active.begin(), active.end(), false);
    for (int i = 0; i < keep; ++i) active[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
    fit_masked_logistic(x, y, active, cfg, w, b);
  }

  SparseClassifier clf;
  clf.budget = budget;
  clf.active = active;
  clf.w.assign(static_cast<std::size_t>(d), 0.0);
  clf.bias = b;
  for (int c = 0; c < d; ++c) {
    const auto i = static_cast<std::size_t>(c);
    if (!active[i]) continue;
    clf.w[i] = w[c] / stdz.scale[i];
    clf.bias -= w[c] * stdz.mean[i] / stdz.scale[i];
  }
  return clf;
}

FeatureStats feature_stats(const Tensor& features) {
  require(features.rank() == 2 && features.dim(0) >= 1, "feature_stats: expected a non-empty [N x d] matrix");
  const std::size_t n = features.dim(0), d = features.dim(1);
  FeatureStats s;
  s.sigma.assign(d, 0.0);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += features.at(r * d + c);
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double v = features.at(r * d + c) - mean[c];
      s.sigma[c] += v * v;
    }
  for (auto& v : s.sigma) v = std::sqrt(v / static_cast<double>(n));
  return s;
}

Tensor manipulate(const Models& m, const Tensor& x0, const SparseClassifier& clf, const FeatureStats& stats,
                  double lam, std::span<const int> seq) {
  const auto d = static_cast<std::size_t>(m.ed.partition().d);
  require(clf.w.size() == d && stats.sigma.size() == d, "manipulate: classifier or stats width differs from d");
  double norm = 0.0;
  for (double v : clf.w) norm += v * v;
  norm = std::sqrt(norm);
  require(norm > 0.0, "manipulate: classifier weight is zero");
  Tensor z = encode_all(m.ed, x0);
  Tensor xT = guided(m, x0, z, seq, true);
  Tensor shifted = z.clone();
  auto sv = shifted.mutable_values();
  for (std::size_t i = 0; i < sv.size(); ++i) {
    const std::size_t c = i % d;
    sv[i] = static_cast<float>(z.at(i) + lam * stats.sigma[c] * clf.w[c] / norm);
  }
  return guided(m, xT, shifted, seq, false);
}

std::vector<double> mask_energy_fraction(const Tensor& before, const Tensor& after, const std::vector<bool>& mask) {
  require(before.shape() == after.shape() && before.rank() == 2 && before.dim(1) == mask.size(),
          "mask_energy_fraction: shapes disagree");
  const std::size_t cols = before.dim(1);
  std::vector<double> out;
  for (std::size_t r = 0; r < before.dim(0); ++r) {
    double in = 0.0, total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = static_cast<double>(after.at(r * cols + c)) - before.at(r * cols + c);
      total += d * d;
      if (mask[c]) in += d * d;
    }
    out.push_back(total > 0.0 ? in / total : 1.0);
  }
  return out;
}

void write_pgm_grid(const std::filesystem::path& path, const Tensor& images, int side, int columns) {
  require(images.rank() == 2 && images.dim(1) == static_cast<std::size_t>(side * side) && columns >= 1,
          "write_pgm_grid: expected [n x side*side] images");
  const int n = static_cast<int>(images.dim(0));
  const int rows = (n + columns - 1) / columns;
  const int width = columns * (side + 1) - 1, height = rows * (side + 1) - 1;
  std::vector<unsigned char> pix(static_cast<std::size_t>(width * height), 0);
  for (int k = 0; k < n; ++k) {
    const int oy = (k / columns) * (side + 1), ox = (k % columns) * (side + 1);
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        double v = images.at(static_cast<std::size_t>(k * side * side + r * side + c));
        v = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
        pix[static_cast<std::size_t>((oy + r) * width + ox + c)] = static_cast<unsigned char>(std::lround(v));
      }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
}

}  // namespace diti
