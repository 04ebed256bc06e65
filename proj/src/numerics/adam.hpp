#pragma once

#include <cstdint>
#include <vector>

#include "numerics/tensor.hpp"

namespace mingtok::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with bias correction. Weight decay is the classic L2 form (added to the
// gradient before the moment updates).
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig config = {});

  // Throws ValidationError naming the parameter index if any grad is absent.
  void step();
  // Resets every gradient to an allocated zero buffer.
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace mingtok::nn
