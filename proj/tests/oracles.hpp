#pragma once

// Test-side reference implementations in double precision. They read
// parameter values out of the library's tensors but share no code with it.

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "diti/nn.hpp"
#include "diti/tensor.hpp"

namespace oracle {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Mat from_tensor(const diti::Tensor& t) {
  Mat m(t.dim(0), t.rank() == 2 ? t.dim(1) : 1);
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = t.at(i);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k)
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += a(i, k) * b(k, j);
  return out;
}

inline Mat hcat(const Mat& a, const Mat& b) {
  Mat out(a.rows, a.cols + b.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t c = 0; c < a.cols; ++c) out(r, c) = a(r, c);
    for (std::size_t c = 0; c < b.cols; ++c) out(r, a.cols + c) = b(r, c);
  }
  return out;
}

inline Mat layer_norm(const Mat& a, double eps = 1e-5) {
  Mat out(a.rows, a.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < a.cols; ++c) mu += a(r, c);
    mu /= a.cols;
    for (std::size_t c = 0; c < a.cols; ++c) var += (a(r, c) - mu) * (a(r, c) - mu);
    var /= a.cols;
    for (std::size_t c = 0; c < a.cols; ++c) out(r, c) = (a(r, c) - mu) / std::sqrt(var + eps);
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

/// y = [x, 1] W for W of shape (in + 1) x out.
inline Mat affine(const Mat& x, const Mat& w) {
  Mat out(x.rows, w.cols);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t j = 0; j < w.cols; ++j) {
      double acc = w(w.rows - 1, j);
      for (std::size_t k = 0; k < x.cols; ++k) acc += x(r, k) * w(k, j);
      out(r, j) = acc;
    }
  return out;
}

/// Linear -> LayerNorm -> SiLU per hidden layer, then Linear.
inline Mat mlp(const Mat& x, const std::vector<Mat>& weights) {
  Mat h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = affine(h, weights[i]);
    if (i + 1 < weights.size()) {
      h = layer_norm(h);
      for (auto& v : h.v) v = silu(v);
    }
  }
  return h;
}

inline Mat time_embedding(std::span<const int> ts, std::size_t dim = 64) {
  Mat out(ts.size(), dim);
  const std::size_t half = dim / 2;
  for (std::size_t r = 0; r < ts.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out(r, i) = std::sin(ts[r] * f);
      out(r, half + i) = std::cos(ts[r] * f);
    }
  return out;
}

/// Parameters of a ParameterList as double matrices (live copies).
inline std::vector<Mat> weights_of(const diti::ParameterList& params) {
  std::vector<Mat> out;
  for (const auto& p : params) out.push_back(from_tensor(p.tensor));
  return out;
}

/// Central finite difference of f with respect to coordinate `i` of `x`.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-3) {
  const double keep = x;
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  return (up - down) / (2.0 * h);
}

/// Agreement within `rel` of max(|fd|, floor): floor guards components that
/// are zero up to rounding.
inline bool grad_close(double analytic, double fd, double rel, double floor) {
  return std::abs(analytic - fd) <= rel * std::max(std::abs(fd), floor);
}

inline double rms(std::span<const float> v) {
  double acc = 0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc / static_cast<double>(std::max<std::size_t>(v.size(), 1)));
}

}  // namespace oracle
