#include "diti/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "diti/error.hpp"

namespace diti {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init) : weight_(Shape{in + 1, out}) {
  if (!zero_init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    auto w = weight_.mutable_values();
    for (std::size_t i = 0; i < in * out; ++i) w[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  }
  weight_.set_requires_grad();
}

Tensor Linear::forward(const Tensor& x) const {
  require(x.rank() == 2 && x.dim(1) == in_features(),
          "Linear: expected input [B x " + std::to_string(in_features()) + "], got " + shape_string(x.shape()));
  Tensor ones(Shape{x.dim(0), 1}, 1.0f);
  return matmul(concat({x, ones}), weight_);
}

Mlp::Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng, bool zero_last) {
  std::size_t prev = in;
  for (auto h : hidden) {
    layers_.emplace_back(prev, h, rng);
    prev = h;
  }
  layers_.emplace_back(prev, out, rng, zero_last);
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = silu(layer_norm(layers_[i].forward(h)));
  return layers_.back().forward(h);
}

void Mlp::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    out.push_back({prefix + ".layer" + std::to_string(i), layers_[i].weight()});
}

Tensor time_embedding(std::span<const int> ts, std::size_t dim) {
  require(dim % 2 == 0, "time embedding dimension must be even");
  const std::size_t half = dim / 2;
  Tensor out(Shape{ts.size(), dim});
  auto v = out.mutable_values();
  std::vector<double> freq(half);
  for (std::size_t i = 0; i < half; ++i) freq[i] = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
  for (std::size_t r = 0; r < ts.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      double arg = ts[r] * freq[i];
      v[r * dim + i] = static_cast<float>(std::sin(arg));
      v[r * dim + half + i] = static_cast<float>(std::cos(arg));
    }
  }
  return out;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  double scale_grad = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) sq += squared_norm(p.grad_view());
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale_grad = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto g = p.grad_view();
    if (g.empty()) continue;
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::Map<const Eigen::ArrayXf> gv(g.data(), n);
    Eigen::Map<Eigen::ArrayXf> w(p.mutable_values().data(), n), m(m_[k].data(), n), v(v_[k].data(), n);
    const auto sg = static_cast<float>(scale_grad);
    m = static_cast<float>(cfg_.beta1) * m + static_cast<float>(1.0 - cfg_.beta1) * sg * gv;
    v = static_cast<float>(cfg_.beta2) * v + static_cast<float>(1.0 - cfg_.beta2) * (sg * gv).square();
    w -= static_cast<float>(cfg_.lr / bc1) * m / ((v / static_cast<float>(bc2)).sqrt() + static_cast<float>(cfg_.eps));
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<Tensor> tensors_of(const ParameterList& list) {
  std::vector<Tensor> out;
  out.reserve(list.size());
  for (const auto& nt : list) out.push_back(nt.tensor);
  return out;
}

double cosine_lr(double base, int step, int total, double floor_frac) {
  if (total <= 0) return base;
  const double progress = std::clamp(static_cast<double>(step) / total, 0.0, 1.0);
  const double pi = std::acos(-1.0);
  return base * (floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + std::cos(pi * progress)));
}

Tensor row_constant(std::span<const float> per_row, std::size_t cols) {
  Tensor out(Shape{per_row.size(), cols});
  auto v = out.mutable_values();
  for (std::size_t r = 0; r < per_row.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = per_row[r];
  return out;
}

}  // namespace diti
