#pragma once

// Dense float tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations on tensors that
// require gradients record a node holding the inputs and a backward rule; the
// recorded nodes form the tape. backward() walks the tape in reverse
// topological order once and then releases it.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace diti {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty() && !backward; }
  std::vector<float>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v);
  static Tensor zeros_like(const Tensor& t);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const;

  std::span<const float> values() const { return node_->value; }
  /// Direct write access. Intended for leaves (parameters, inputs) only.
  std::span<float> mutable_values();
  float item() const;
  float at(std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  /// Marks a leaf as trainable. Throws on non-leaf tensors.
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; zeros when no backward pass reached this tensor.
  std::vector<float> grad() const;
  std::span<const float> grad_view() const { return node_->grad; }
  void zero_grad();

  /// Value copy with a new shape of equal element count. Not differentiable.
  Tensor reshaped(Shape shape) const;
  /// Deep copy of the values as a fresh leaf.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, operations on the current thread record nothing and produce
/// constant tensors.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise. `b` has a's shape or is a one-element scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);

// Matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Per-row normalisation to zero mean and unit variance (no affine part).
Tensor layer_norm(const Tensor& a, float eps = 1e-5f);
/// Column concatenation of rank-2 tensors with equal row counts.
Tensor concat(const std::vector<Tensor>& parts);
/// Columns [begin, end) of a rank-2 tensor.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);

// Reductions to a one-element tensor, accumulated in double.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Value-equal constant; gradients stop here.
Tensor detach(const Tensor& a);

/// Propagates d(loss)/d(leaf) into every trainable leaf reachable from
/// `loss`, then releases the recorded graph.
void backward(const Tensor& loss);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return scale(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return scale(a, s); }

/// Rows `idx` of a rank-2 tensor, as a new constant.
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx);
Tensor row_of(const Tensor& m, std::size_t r);
/// begin, begin + 1, ..., end - 1
std::vector<std::size_t> row_range(std::size_t begin, std::size_t end);

/// Sum of squares in double precision (no taping).
double squared_norm(std::span<const float> v);
bool all_finite(std::span<const float> v);

}  // namespace diti
