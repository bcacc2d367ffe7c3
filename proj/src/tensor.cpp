#include "diti/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "diti/error.hpp"

namespace diti {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

// Builds the result node. Inputs and the backward rule are kept only when
// taping is enabled and some input is trainable.
Tensor make_result(Shape shape, std::vector<float> value, std::vector<NodePtr> inputs,
                   std::function<void(detail::Node&)> rule) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = g_grad_enabled &&
               std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& n) { return n->requires_grad; });
  if (track) {
    for (const auto& in : inputs)
      require(!in->consumed, "operation on a tensor whose graph was already consumed by backward()");
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(rule);
  }
  return Tensor::wrap(std::move(node));
}

bool is_scalar_operand(const Tensor& a, const Tensor& b) { return b.numel() == 1 && a.numel() != 1; }

void check_elementwise(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || b.numel() == 1) return;
  throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
}

void check_rank2(const Tensor& a, const char* op) {
  require(a.rank() == 2, std::string(op) + ": expected a rank-2 tensor, got " + shape_string(a.shape()));
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dfdx) {
  const auto in = a.values();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, [dfdx](detail::Node& self) {
    auto& x = *self.inputs[0];
    auto& gx = x.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(x.value[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<float>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad;
}

// --- Tensor ------------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<detail::Node>()) {
  for (auto d : shape) require(d > 0 || shape.size() == 1, "tensor dimensions must be positive");
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : node_(std::make_shared<detail::Node>()) {
  require(shape_numel(shape) == values.size(), "tensor: shape " + shape_string(shape) + " does not match " +
                                                   std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0f); }

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  require(i < rank(), "dimension index out of range");
  return node_->shape[i];
}

std::span<float> Tensor::mutable_values() { return node_->value; }

float Tensor::item() const {
  require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  require(node_->is_leaf() && !node_->consumed, "set_requires_grad: only leaf tensors can be marked trainable");
  node_->requires_grad = on;
  return *this;
}

std::vector<float> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<float>(numel(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == numel(), "reshape: element count mismatch");
  return Tensor(std::move(shape), node_->value);
}

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->value); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_elementwise(a, b, "add");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<float> out(x.size());
  bool bcast = is_scalar_operand(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + (bcast ? y[0] : y[i]);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [bcast](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      if (bcast) {
        double acc = 0.0;
        for (float v : self.grad) acc += v;
        g[0] += static_cast<float>(acc);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_elementwise(a, b, "sub");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<float> out(x.size());
  bool bcast = is_scalar_operand(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - (bcast ? y[0] : y[i]);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [bcast](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      if (bcast) {
        double acc = 0.0;
        for (float v : self.grad) acc += v;
        g[0] -= static_cast<float>(acc);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_elementwise(a, b, "mul");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<float> out(x.size());
  bool bcast = is_scalar_operand(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * (bcast ? y[0] : y[i]);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [bcast](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (bcast ? nb.value[0] : nb.value[i]);
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      if (bcast) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          acc += static_cast<double>(self.grad[i]) * na.value[i];
        g[0] += static_cast<float>(acc);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  return unary(
      a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor silu(const Tensor& a) {
  const auto n = static_cast<Eigen::Index>(a.numel());
  Eigen::Map<const Eigen::ArrayXf> x(a.values().data(), n);
  Eigen::ArrayXf sig = 1.0f / (1.0f + (-x).exp());
  std::vector<float> out(a.numel());
  Eigen::Map<Eigen::ArrayXf>(out.data(), n) = x * sig;
  return make_result(a.shape(), std::move(out), {a.node()}, [sig = std::move(sig), n](detail::Node& self) {
    auto& in = *self.inputs[0];
    Eigen::Map<const Eigen::ArrayXf> xv(in.value.data(), n), g(self.grad.data(), n);
    Eigen::Map<Eigen::ArrayXf>(in.ensure_grad().data(), n) += g * sig * (1.0f + xv * (1.0f - sig));
  });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

// --- matrices ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ContractError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " * " +
                        shape_string(b.shape()));
  std::vector<float> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    ConstMap g(self.grad.data(), m, n);
    if (na.requires_grad) {
      MutMap(na.ensure_grad().data(), m, k).noalias() += g * ConstMap(nb.value.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MutMap(nb.ensure_grad().data(), k, n).noalias() += ConstMap(na.value.data(), m, k).transpose() * g;
    }
  });
}

Tensor layer_norm(const Tensor& a, float eps) {
  check_rank2(a, "layer_norm");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto x = a.values();
  std::vector<float> out(x.size());
  std::vector<float> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<float>((row[c] - mu) * is);
  }
  return make_result(a.shape(), std::move(out), {a.node()},
                     [rows, cols, inv_std = std::move(inv_std)](detail::Node& self) {
                       auto& gx = self.inputs[0]->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* dy = self.grad.data() + r * cols;
                         const float* y = self.value.data() + r * cols;
                         double mean_dy = 0.0, mean_dyy = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           mean_dy += dy[c];
                           mean_dyy += static_cast<double>(dy[c]) * y[c];
                         }
                         mean_dy /= static_cast<double>(cols);
                         mean_dyy /= static_cast<double>(cols);
                         for (std::size_t c = 0; c < cols; ++c)
                           gx[r * cols + c] += static_cast<float>(inv_std[r] * (dy[c] - mean_dy - y[c] * mean_dyy));
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat: no inputs");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    check_rank2(p, "concat");
    require(p.dim(0) == rows, "concat: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.node());
  }
  std::vector<float> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto v = parts[i].values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[i], widths[i], out.data() + r * total + offset);
    offset += widths[i];
  }
  return make_result({rows, total}, std::move(out), std::move(inputs),
                     [rows, total, widths = std::move(widths)](detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < widths.size(); ++i) {
                         auto& in = *self.inputs[i];
                         if (in.requires_grad) {
                           auto& g = in.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < widths[i]; ++c)
                               g[r * widths[i] + c] += self.grad[r * total + off + c];
                         }
                         off += widths[i];
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  check_rank2(a, "slice");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  require(begin < end && end <= cols, "slice: column range [" + std::to_string(begin) + ", " +
                                          std::to_string(end) + ") out of bounds for " + shape_string(a.shape()));
  const std::size_t w = end - begin;
  const auto x = a.values();
  std::vector<float> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * cols + begin, w, out.data() + r * w);
  return make_result({rows, w}, std::move(out), {a.node()}, [rows, cols, begin, w](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += self.grad[r * w + c];
  });
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  return make_result({1}, {static_cast<float>(acc)}, {a.node()}, [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  const double n = static_cast<double>(a.numel());
  return make_result({1}, {static_cast<float>(acc / n)}, {a.node()}, [n](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const float d = static_cast<float>(self.grad[0] / n);
    for (auto& v : g) v += d;
  });
}

Tensor detach(const Tensor& a) { return Tensor(a.shape(), std::vector<float>(a.values().begin(), a.values().end())); }

// --- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
  require(loss.numel() == 1, "backward: loss must be a scalar, got " + shape_string(loss.shape()));
  const auto& root = loss.node();
  require(!root->consumed, "backward: graph already consumed; run a new forward pass first");
  if (!root->requires_grad) return;  // constant loss: nothing depends on a trainable leaf
  if (!root->backward) {
    root->ensure_grad()[0] += 1.0f;
    return;
  }

  // Reverse topological order via iterative post-order DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        require(!child->consumed, "backward: graph already consumed; run a new forward pass first");
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (n->backward) n->grad.assign(n->value.size(), 0.0f);
  root->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (auto* n : order) {
    if (n->backward) {
      n->consumed = true;
      n->inputs.clear();
      n->backward = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// Plain loop: a vectorised reduction over a map would peel at the runtime
// alignment and make the result depend on the allocation address.
double squared_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return acc;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
  require(m.rank() == 2, "gather_rows: expected a matrix");
  const std::size_t cols = m.dim(1);
  Tensor out(Shape{idx.size(), cols});
  auto v = out.mutable_values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < m.dim(0), "gather_rows: row index out of range");
    std::copy_n(m.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                v.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return out;
}

Tensor row_of(const Tensor& m, std::size_t r) {
  std::size_t idx[1] = {r};
  return gather_rows(m, idx);
}

std::vector<std::size_t> row_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

}  // namespace diti
