#pragma once
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "numerics/rng.hpp"
#include "numerics/tensor.hpp"

namespace testutil {

using mingtok::nn::Rng;
using mingtok::nn::Shape;
using mingtok::nn::Tensor;

template <typename T>
Tensor<T> random(Rng& rng, Shape shape, double scale = 1.0) {
  return Tensor<T>::from(shape, rng.normal_vector<T>(mingtok::nn::shape_numel(shape), scale));
}

template <typename T>
Tensor<T> random_param(Rng& rng, Shape shape, double scale = 1.0) {
  return Tensor<T>::parameter(shape, rng.normal_vector<T>(mingtok::nn::shape_numel(shape), scale));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(T)) == 0;
}

template <typename T>
bool bit_equal_rows(const Tensor<T>& a, const Tensor<T>& b, std::size_t rows) {
  const std::size_t w = a.dim(1);
  return std::memcmp(a.values().data(), b.values().data(), rows * w * sizeof(T)) == 0;
}

template <typename T>
void zero_fill(Tensor<T> t) {
  for (auto& v : t.mutable_values()) v = T(0);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mingtok_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
