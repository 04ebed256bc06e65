#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "numerics/error.hpp"

namespace mingtok::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  // Lazily allocated zero-initialized gradient buffer.
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording is on by default; NoGradGuard disables it for the current
// thread until the guard goes out of scope.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Test hook: negate the upstream gradient entering every node whose op name
// matches, which flips the sign of that op's backward rule. Empty disables.
void set_backward_fault(std::string op_name);
const std::string& backward_fault();

// Handle to a node in the autodiff graph. Copies share the node; values are
// immutable once built except through mutable_values() on leaves.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);
  // Leaf with requires_grad set.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const;
  const std::string& op_name() const { return node_->op; }

  // Only valid on leaves; used by optimizers and loaders.
  std::span<T> mutable_values();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode sweep from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  // Fresh leaf with the same values, cut from the graph.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Finite-value check over a whole graph, in forward order. Returns an empty
// string when every value is finite, otherwise "<op> <shape>" of the first
// offending node.
template <typename T>
std::string first_non_finite(const Tensor<T>& root);

template <typename T>
bool all_finite(const Tensor<T>& t);

// ---- forward ops (all participate in autodiff) ----

// [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise with numpy-style trailing broadcast.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
// Half-open range [begin, end) along axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Rows of a [n, ...] tensor, in the given order (repeats allowed).
template <typename T>
Tensor<T> index_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows);

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim = false);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);

template <typename T>
Tensor<T> softmax(const Tensor<T>& a);
// Normalizes the last axis; scale and shift have the last axis' extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                     double eps = 1e-5);
template <typename T>
Tensor<T> silu(const Tensor<T>& a);
// Exact form x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, double eps = 1e-12);

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);
// Mean over rows of -log softmax(logits)[row, target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets);

}  // namespace mingtok::nn
