#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "numerics/container.hpp"
#include "numerics/tensor.hpp"

namespace mingtok::nn {

struct GradCheckResult {
  double max_error = 0.0;
  std::string worst;  // parameter name (or empty) and coordinate
};

namespace detail {

template <typename T, typename F>
T eval_finite(F& f, const std::string& where) {
  NoGradGuard guard;
  const Tensor<T> y = f();
  const T v = y.item();
  if (!std::isfinite(static_cast<double>(v))) throw NumericError("grad_check: non-finite value at " + where);
  return v;
}

}  // namespace detail

// Compares reverse-mode gradients of the scalar f() w.r.t. each listed leaf
// with central differences. Error per coordinate is
// |analytic - numeric| / max(1, |analytic|). At most `max_coords` coordinates
// per tensor are probed (evenly strided), 0 means all.
template <typename T, typename F>
GradCheckResult grad_check_params(F&& f, const ParamList<T>& params, double eps, std::size_t max_coords = 0) {
  for (const auto& p : params) Tensor<T>(p.tensor).zero_grad();
  {
    const Tensor<T> y = f();
    const std::string bad = first_non_finite(y);
    if (!bad.empty()) throw NumericError("grad_check: non-finite intermediate in " + bad);
    y.backward();
  }
  GradCheckResult result;
  for (const auto& p : params) {
    Tensor<T> x = p.tensor;
    const std::vector<T> analytic = x.has_grad() ? std::vector<T>(x.grad().begin(), x.grad().end())
                                                 : std::vector<T>(x.numel(), T(0));
    const std::size_t n = x.numel();
    const std::size_t stride = (max_coords == 0 || n <= max_coords) ? 1 : (n + max_coords - 1) / max_coords;
    auto vals = x.mutable_values();
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = vals[i];
      const std::string where = p.name + "[" + std::to_string(i) + "]";
      vals[i] = static_cast<T>(orig + eps);
      const double plus = detail::eval_finite<T>(f, where);
      vals[i] = static_cast<T>(orig - eps);
      const double minus = detail::eval_finite<T>(f, where);
      vals[i] = orig;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (result.worst.empty() || err > result.max_error) {
        result.max_error = err;
        result.worst = where;
      }
    }
  }
  return result;
}

// Single-input form: x must be a leaf that requires grad; f maps x to a scalar.
template <typename T, typename F>
double grad_check(F&& f, const Tensor<T>& x, double eps) {
  ParamList<T> params{{"x", x}};
  auto thunk = [&]() { return f(x); };
  return grad_check_params<T>(thunk, params, eps).max_error;
}

}  // namespace mingtok::nn
