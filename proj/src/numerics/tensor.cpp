#include "numerics/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace mingtok::nn {

namespace {
thread_local bool g_grad_enabled = true;
std::string g_backward_fault;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_backward_fault(std::string op_name) { g_backward_fault = std::move(op_name); }
const std::string& backward_fault() { return g_backward_fault; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ValidationError("tensor: shape " + shape_str(shape) + " needs " +
                          std::to_string(shape_numel(shape)) + " values, got " +
                          std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ValidationError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                          shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ValidationError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!node_->is_leaf) throw ValidationError("mutable_values: '" + node_->op + "' is not a leaf");
  return node_->value;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw ValidationError("set_requires_grad: '" + node_->op + "' is not a leaf");
  node_->requires_grad = flag;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value);
}

namespace {

// Forward (topological) order of every node reachable from root.
template <typename T>
std::vector<detail::Node<T>*> topo_order(detail::Node<T>* root, bool grad_only) {
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node<T>* child = node->inputs[next++].get();
      if ((!grad_only || child->requires_grad) && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ValidationError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;
  auto order = topo_order(node_.get(), true);
  for (auto* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  const std::string& fault = g_backward_fault;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (!n->backward) continue;
    if (!fault.empty() && n->op == fault) {
      for (T& g : n->grad) g = -g;
    }
    n->backward(*n);
  }
  for (auto* n : order) {
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
std::string first_non_finite(const Tensor<T>& root) {
  auto order = topo_order(root.node().get(), false);
  for (auto* n : order) {
    for (T v : n->value) {
      if (!std::isfinite(v)) return n->op + " " + shape_str(n->shape);
    }
  }
  return {};
}

template class Tensor<float>;
template class Tensor<double>;
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template std::string first_non_finite(const Tensor<float>&);
template std::string first_non_finite(const Tensor<double>&);

}  // namespace mingtok::nn
