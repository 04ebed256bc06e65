#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "numerics/tensor.hpp"

namespace mingtok::nn {

// Tensor container file layout (all integers little-endian):
//   "MTOK" | u32 version=1 | u32 count |
//   count x { u16 name_len | name bytes | u32 ndim | u32 dims[ndim] | f32 data[] }
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

std::string encode_container(const std::vector<NamedArray>& entries);
std::vector<NamedArray> decode_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const std::vector<NamedArray>& entries);
std::vector<NamedArray> read_container(const std::filesystem::path& path);

const NamedArray& find_entry(const std::vector<NamedArray>& entries, const std::string& name);

// Named trainable tensors of a module, in registration order.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <typename T>
NamedArray to_array(const std::string& name, const Tensor<T>& t) {
  NamedArray a{name, t.shape(), {}};
  a.data.reserve(t.numel());
  for (T v : t.values()) a.data.push_back(static_cast<float>(v));
  return a;
}

template <typename T>
Tensor<T> from_array(const NamedArray& a) {
  return Tensor<T>::from(a.shape, std::vector<T>(a.data.begin(), a.data.end()));
}

template <typename T>
std::vector<NamedArray> to_arrays(const ParamList<T>& params) {
  std::vector<NamedArray> out;
  for (const auto& p : params) out.push_back(to_array(p.name, p.tensor));
  return out;
}

// Copies values by name into existing leaves; every parameter must be present
// with a matching shape.
template <typename T>
void load_arrays(const ParamList<T>& params, const std::vector<NamedArray>& entries) {
  for (const auto& p : params) {
    const NamedArray& a = find_entry(entries, p.name);
    if (a.shape != p.tensor.shape()) {
      throw ValidationError("checkpoint: '" + p.name + "' has shape " + shape_str(a.shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
    }
    auto dst = Tensor<T>(p.tensor).mutable_values();
    for (std::size_t i = 0; i < a.data.size(); ++i) dst[i] = static_cast<T>(a.data[i]);
  }
}

}  // namespace mingtok::nn
