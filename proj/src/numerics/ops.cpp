#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "numerics/tensor.hpp"

namespace mingtok::nn {

namespace {

template <typename T>
using NodeT = detail::Node<T>;
template <typename T>
using BackwardFn = std::function<void(NodeT<T>&)>;

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> value,
                 const std::vector<Tensor<T>>& inputs, BackwardFn<T> bw) {
  auto node = std::make_shared<NodeT<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool record = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) record = record || in.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(bw);
  }
  return Tensor<T>(std::move(node));
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw ValidationError(op + ": " + detail);
}

std::string two_shapes(const Shape& a, const Shape& b) { return shape_str(a) + " vs " + shape_str(b); }

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, "cannot broadcast " + two_shapes(a, b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Offset into `in` for each element of `out` under trailing broadcast.
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    std::size_t oi = r - in.size() + i;
    strides[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  std::size_t n = shape_numel(out);
  std::vector<std::size_t> offs(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    offs[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out[d]) break;
      off -= strides[d] * out[d];
      idx[d] = 0;
    }
  }
  return offs;
}

enum class Binary { Add, Sub, Mul };

template <typename T>
Tensor<T> binary(const char* op, Binary kind, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = kind == Binary::Add ? av[i] + bv[i] : kind == Binary::Sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    return finish<T>(op, a.shape(), std::move(out), {a, b}, [kind](NodeT<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      const auto& g = self.grad;
      if (na.requires_grad) {
        auto& ga = na.grad_buffer();
        if (kind == Binary::Mul) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb.value[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        if (kind == Binary::Mul) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na.value[i];
        } else if (kind == Binary::Sub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }
  Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  auto oa = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(out_shape, a.shape()));
  auto ob = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(out_shape, b.shape()));
  std::vector<T> out(oa->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = av[(*oa)[i]];
    T y = bv[(*ob)[i]];
    out[i] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
  }
  return finish<T>(op, std::move(out_shape), std::move(out), {a, b}, [kind, oa, ob](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[(*oa)[i]] += kind == Binary::Mul ? g[i] * nb.value[(*ob)[i]] : g[i];
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        T d = kind == Binary::Mul ? g[i] * na.value[(*oa)[i]] : kind == Binary::Sub ? -g[i] : g[i];
        gb[(*ob)[i]] += d;
      }
    }
  });
}

template <typename T>
Tensor<T> unary(const char* op, const Tensor<T>& a, T (*f)(T), T (*df)(T)) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return finish<T>(op, a.shape(), std::move(out), {a}, [df](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * df(na.value[i]);
  });
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}
template <typename T>
T silu_f(T x) {
  return x * sigmoid(x);
}
template <typename T>
T silu_df(T x) {
  T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}
template <typename T>
T gelu_f(T x) {
  return x * T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
}
template <typename T>
T gelu_df(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

// outer x n x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
std::size_t last_dim(const char* op, const Tensor<T>& a) {
  if (a.rank() == 0) shape_error(op, "needs rank >= 1, got scalar");
  return a.shape().back();
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0)) {
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    out_shape = {m, n};
  } else if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    out_shape = {batch, m, n};
  } else {
    shape_error("matmul", "incompatible shapes " + two_shapes(a.shape(), b.shape()));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    Eigen::Map<const Mat> A(a.values().data() + i * m * k, m, k);
    Eigen::Map<const Mat> B(b.values().data() + i * k * n, k, n);
    Eigen::Map<Mat> C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return finish<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                   [batch, m, k, n](NodeT<T>& self) {
                     auto& na = *self.inputs[0];
                     auto& nb = *self.inputs[1];
                     for (std::size_t i = 0; i < batch; ++i) {
                       Eigen::Map<const Mat> G(self.grad.data() + i * m * n, m, n);
                       if (na.requires_grad) {
                         Eigen::Map<const Mat> B(nb.value.data() + i * k * n, k, n);
                         Eigen::Map<Mat> GA(na.grad_buffer().data() + i * m * k, m, k);
                         GA.noalias() += G * B.transpose();
                       }
                       if (nb.requires_grad) {
                         Eigen::Map<const Mat> A(na.value.data() + i * m * k, m, k);
                         Eigen::Map<Mat> GB(nb.grad_buffer().data() + i * k * n, k, n);
                         GB.noalias() += A.transpose() * G;
                       }
                     }
                   });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", Binary::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", Binary::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", Binary::Mul, a, b);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v += s;
  return finish<T>("add_scalar", a.shape(), std::move(out), {a}, [](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= s;
  return finish<T>("mul_scalar", a.shape(), std::move(out), {a}, [s](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  std::vector<bool> used(r, false);
  if (perm.size() != r) shape_error("permute", "permutation size does not match rank of " + shape_str(in));
  for (std::size_t p : perm) {
    if (p >= r || used[p]) shape_error("permute", "invalid permutation for " + shape_str(in));
    used[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  // src[i] is the input offset of output element i.
  const std::size_t total = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < total; ++k) {
    (*src)[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(total);
  auto av = a.values();
  for (std::size_t k = 0; k < total; ++k) out[k] = av[(*src)[k]];
  return finish<T>("permute", std::move(out_shape), std::move(out), {a}, [src](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t k = 0; k < src->size(); ++k) ga[(*src)[k]] += self.grad[k];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= a.rank() || axis1 >= a.rank()) {
    shape_error("transpose", "axes out of range for " + shape_str(a.shape()));
  }
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[axis0], perm[axis1]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return finish<T>("reshape", std::move(shape), std::move(out), {a}, [](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin > end || end > a.dim(axis)) {
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  }
  AxisSplit s = split_at(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.begin() + (o * s.n + begin) * s.inner, len * s.inner, out.begin() + o * len * s.inner);
  }
  return finish<T>("slice", std::move(out_shape), std::move(out), {a}, [s, begin, len](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < len * s.inner; ++j) {
        ga[(o * s.n + begin) * s.inner + j] += self.grad[o * len * s.inner + j];
      }
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) shape_error("concat", "axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != ref.size()) shape_error("concat", "rank mismatch " + two_shapes(ref, probe));
    probe[axis] = ref[axis];
    if (probe != ref) shape_error("concat", "shape mismatch " + two_shapes(ref, p.shape()));
    lens.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  AxisSplit s = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t at = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pv = parts[p].values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + o * lens[p] * s.inner, lens[p] * s.inner,
                  out.begin() + (o * s.n + at) * s.inner);
    }
    at += lens[p];
  }
  return finish<T>("concat", std::move(out_shape), std::move(out), parts, [s, lens](NodeT<T>& self) {
    std::size_t at = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      auto& np = *self.inputs[p];
      if (np.requires_grad) {
        auto& gp = np.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t j = 0; j < lens[p] * s.inner; ++j) {
            gp[o * lens[p] * s.inner + j] += self.grad[(o * s.n + at) * s.inner + j];
          }
        }
      }
      at += lens[p];
    }
  });
}

template <typename T>
Tensor<T> index_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows) {
  if (a.rank() == 0) shape_error("index_rows", "needs rank >= 1");
  const std::size_t n = a.dim(0);
  const std::size_t row = n == 0 ? 0 : a.numel() / n;
  for (std::size_t r : rows) {
    if (r >= n) shape_error("index_rows", "row " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  std::vector<T> out(rows.size() * row);
  auto av = a.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(av.begin() + rows[i] * row, row, out.begin() + i * row);
  }
  return finish<T>("index_rows", std::move(out_shape), std::move(out), {a}, [rows, row](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < row; ++j) ga[rows[i] * row + j] += self.grad[i * row + j];
    }
  });
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const char* op, const Tensor<T>& a, std::size_t axis, bool keepdim, bool average) {
  if (axis >= a.rank()) shape_error(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const double scale = average ? 1.0 / static_cast<double>(s.n) : 1.0;
  std::vector<T> out(s.outer * s.inner);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < s.n; ++j) acc += av[(o * s.n + j) * s.inner + i];
      out[o * s.inner + i] = static_cast<T>(acc * scale);
    }
  }
  return finish<T>(op, std::move(out_shape), std::move(out), {a}, [s, scale](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          ga[(o * s.n + j) * s.inner + i] += static_cast<T>(self.grad[o * s.inner + i] * scale);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> reduce_all(const char* op, const Tensor<T>& a, bool average) {
  double acc = 0;
  for (T v : a.values()) acc += v;
  const double scale = average ? 1.0 / static_cast<double>(std::max<std::size_t>(a.numel(), 1)) : 1.0;
  return finish<T>(op, Shape{}, {static_cast<T>(acc * scale)}, {a}, [scale](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    const T g = static_cast<T>(self.grad[0] * scale);
    for (T& v : ga) v += g;
  });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  return reduce_axis("sum", a, axis, keepdim, false);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  return reduce_axis("mean", a, axis, keepdim, true);
}
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  return reduce_all("sum_all", a, false);
}
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return reduce_all("mean_all", a, true);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t d = last_dim("softmax", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T* y = out.data() + r * d;
    T mx = *std::max_element(x, x + d);
    double z = 0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    const T inv = static_cast<T>(1.0 / z);
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }
  return finish<T>("softmax", a.shape(), std::move(out), {a}, [d, rows](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * y[j];
      for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += y[j] * static_cast<T>(g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, double eps) {
  const std::size_t d = last_dim("layer_norm", x);
  if (scale.shape() != Shape{d} || shift.shape() != Shape{d}) {
    shape_error("layer_norm", "scale/shift " + two_shapes(scale.shape(), shift.shape()) + " do not match input " +
                                  shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  auto xv = x.values();
  auto sv = scale.values();
  auto bv = shift.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      T h = static_cast<T>((xr[j] - mu) * rs);
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * sv[j] + bv[j];
    }
  }
  return finish<T>("layer_norm", x.shape(), std::move(out), {x, scale, shift},
                   [d, rows, xhat, rstd](NodeT<T>& self) {
                     auto& nx = *self.inputs[0];
                     auto& ns = *self.inputs[1];
                     auto& nb = *self.inputs[2];
                     const auto& g = self.grad;
                     if (ns.requires_grad) {
                       auto& gs = ns.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gs[j] += g[r * d + j] * (*xhat)[r * d + j];
                     }
                     if (nb.requires_grad) {
                       auto& gb = nb.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                     }
                     if (nx.requires_grad) {
                       auto& gx = nx.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0, m2 = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           double dh = static_cast<double>(g[r * d + j]) * ns.value[j];
                           m1 += dh;
                           m2 += dh * (*xhat)[r * d + j];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           double dh = static_cast<double>(g[r * d + j]) * ns.value[j];
                           gx[r * d + j] += static_cast<T>((*rstd)[r] * (dh - m1 - (*xhat)[r * d + j] * m2));
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary<T>("silu", a, &silu_f<T>, &silu_df<T>);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return unary<T>("gelu", a, &gelu_f<T>, &gelu_df<T>);
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, double eps) {
  const std::size_t d = last_dim("l2_normalize", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(av[r * d + j]) * av[r * d + j];
    const double n = std::max(std::sqrt(ss), eps);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>(av[r * d + j] / n);
  }
  return finish<T>("l2_normalize", a.shape(), std::move(out), {a}, [d, rows, norms, eps](NodeT<T>& self) {
    auto& na = *self.inputs[0];
    if (!na.requires_grad) return;
    auto& ga = na.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = (*norms)[r];
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      double dot = 0;
      if (n > eps) {
        for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * y[j];
      }
      for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += static_cast<T>((g[j] - y[j] * dot) / n);
    }
  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_error("mse_loss", "shape mismatch " + two_shapes(pred.shape(), target.shape()));
  const std::size_t n = pred.numel();
  double acc = 0;
  auto pv = pred.values();
  auto tv = target.values();
  for (std::size_t i = 0; i < n; ++i) {
    double e = static_cast<double>(pv[i]) - tv[i];
    acc += e * e;
  }
  const double inv = n ? 1.0 / static_cast<double>(n) : 0.0;
  return finish<T>("mse_loss", Shape{}, {static_cast<T>(acc * inv)}, {pred, target}, [inv](NodeT<T>& self) {
    auto& np = *self.inputs[0];
    auto& nt = *self.inputs[1];
    const double g = self.grad[0] * 2.0 * inv;
    for (std::size_t i = 0; i < np.value.size(); ++i) {
      const double e = static_cast<double>(np.value[i]) - nt.value[i];
      if (np.requires_grad) np.grad_buffer()[i] += static_cast<T>(g * e);
      if (nt.requires_grad) nt.grad_buffer()[i] -= static_cast<T>(g * e);
    }
  });
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_error("l1_loss", "shape mismatch " + two_shapes(pred.shape(), target.shape()));
  const std::size_t n = pred.numel();
  double acc = 0;
  auto pv = pred.values();
  auto tv = target.values();
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(pv[i]) - tv[i]);
  const double inv = n ? 1.0 / static_cast<double>(n) : 0.0;
  return finish<T>("l1_loss", Shape{}, {static_cast<T>(acc * inv)}, {pred, target}, [inv](NodeT<T>& self) {
    auto& np = *self.inputs[0];
    auto& nt = *self.inputs[1];
    const T g = static_cast<T>(self.grad[0] * inv);
    for (std::size_t i = 0; i < np.value.size(); ++i) {
      const T e = np.value[i] - nt.value[i];
      const T s = e > T(0) ? g : e < T(0) ? -g : T(0);
      if (np.requires_grad) np.grad_buffer()[i] += s;
      if (nt.requires_grad) nt.grad_buffer()[i] -= s;
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    shape_error("cross_entropy", "logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) +
                                     " targets");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t v = logits.dim(1);
  for (std::size_t t : targets) {
    if (t >= v) shape_error("cross_entropy", "target " + std::to_string(t) + " out of range for " + std::to_string(v) + " classes");
  }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  auto lv = logits.values();
  double acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = lv.data() + r * v;
    T mx = *std::max_element(x, x + v);
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    const double lse = std::log(z) + mx;
    acc += lse - x[targets[r]];
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] = static_cast<T>(std::exp(x[j] - lse));
  }
  const double inv = rows ? 1.0 / static_cast<double>(rows) : 0.0;
  return finish<T>("cross_entropy", Shape{}, {static_cast<T>(acc * inv)}, {logits},
                   [probs, targets, rows, v, inv](NodeT<T>& self) {
                     auto& nl = *self.inputs[0];
                     if (!nl.requires_grad) return;
                     auto& gl = nl.grad_buffer();
                     const double g = self.grad[0] * inv;
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < v; ++j) {
                         double p = (*probs)[r * v + j] - (j == targets[r] ? 1.0 : 0.0);
                         gl[r * v + j] += static_cast<T>(g * p);
                       }
                     }
                   });
}

#define MINGTOK_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                 \
  template Tensor<T> index_rows(const Tensor<T>&, const std::vector<std::size_t>&);                      \
  template Tensor<T> sum(const Tensor<T>&, std::size_t, bool);                                           \
  template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);                                          \
  template Tensor<T> sum_all(const Tensor<T>&);                                                          \
  template Tensor<T> mean_all(const Tensor<T>&);                                                         \
  template Tensor<T> softmax(const Tensor<T>&);                                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);           \
  template Tensor<T> silu(const Tensor<T>&);                                                             \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> l2_normalize(const Tensor<T>&, double);                                             \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<std::size_t>&);

MINGTOK_INSTANTIATE_OPS(float)
MINGTOK_INSTANTIATE_OPS(double)

}  // namespace mingtok::nn
