#include "numerics/adam.hpp"

#include <cmath>

namespace mingtok::nn {

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw ValidationError("adam: parameter " + std::to_string(i) + " " + shape_str(params_[i].shape()) +
                            " has no gradient");
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_values();
    auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = static_cast<double>(grad[j]) + config_.weight_decay * theta[j];
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      theta[j] = static_cast<T>(theta[j] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) {
    p.zero_grad();
    p.node()->grad_buffer();
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace mingtok::nn
