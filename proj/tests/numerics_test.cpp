#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "numerics/adam.hpp"
#include "numerics/container.hpp"
#include "numerics/gradcheck.hpp"

using namespace mingtok;
using namespace mingtok::nn;
using testutil::bit_equal;
using testutil::max_abs_diff;

TEST_CASE("matmul with identity returns the other operand") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = testutil::random<double>(rng, {3, 3});
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    auto i3 = Tensor<double>::from({3, 3}, eye);
    CHECK(bit_equal(matmul(i3, a), a));
    CHECK(bit_equal(matmul(a, i3), a));
  }
}

TEST_CASE("matmul agrees with a naive triple loop") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
    auto a = testutil::random<double>(rng, {m, k});
    auto b = testutil::random<double>(rng, {k, n});
    auto c = matmul(a, b);
    REQUIRE(c.shape() == Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
        CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("shape mismatch names the op and both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find(shape_str({2, 3})) != std::string::npos);
    CHECK(msg.find(shape_str({4, 5})) != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({4})), ValidationError);
}

TEST_CASE("softmax of zeros is uniform") {
  auto s = softmax(Tensor<double>::zeros({4}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("layer_norm of a constant vector gives zeros") {
  auto x = Tensor<double>::full({2, 5}, 3.7);
  auto y = layer_norm(x, Tensor<double>::full({5}, 1.0), Tensor<double>::zeros({5}));
  for (double v : y.values()) CHECK(v == 0.0);
  auto shifted = layer_norm(x, Tensor<double>::full({5}, 2.0), Tensor<double>::full({5}, 0.5));
  for (double v : shifted.values()) CHECK(v == 0.5);
}

TEST_CASE("softmax rows sum to one and l2_normalize rows have unit norm") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(9);
    auto x = testutil::random<float>(rng, {rows, cols}, 1.0 + 4.0 * rng.uniform());
    auto s = softmax(x);
    auto n = l2_normalize(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0, sq = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        sum += s[r * cols + c];
        sq += double(n[r * cols + c]) * n[r * cols + c];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
      CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor<double>::parameter({1}, {3.0});
  sum_all(mul(x, x)).backward();
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 6.0);
  sum_all(mul(x, x)).backward();
  CHECK(x.grad()[0] == 12.0);
}

TEST_CASE("backward of mean") {
  auto x = Tensor<double>::parameter({4}, {1, -2, 3, 5});
  mean_all(x).backward();
  for (double g : x.grad()) CHECK(g == 0.25);
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor<double>::parameter({3}, {1, 2, 3});
  CHECK_THROWS_AS(mul_scalar(x, 2.0).backward(), ValidationError);
}

TEST_CASE("no-grad guard records nothing") {
  auto x = Tensor<double>::parameter({2}, {1, 2});
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check on sum of squares and on a constant") {
  Rng rng(4);
  auto x = testutil::random_param<double>(rng, {7});
  const double err = grad_check<double>([](const Tensor<double>& v) { return sum_all(mul(v, v)); }, x, 1e-6);
  CHECK(err <= 1e-6);
  const double zero = grad_check<double>(
      [](const Tensor<double>& v) { return add_scalar(mul_scalar(sum_all(v), 0.0), 2.5); }, x, 1e-6);
  CHECK(zero == 0.0);
}

TEST_CASE("grad_check rejects non-finite intermediates") {
  auto x = Tensor<double>::parameter({2}, {1.0, 2.0});
  auto inf = Tensor<double>::from({2}, {std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(grad_check<double>([&](const Tensor<double>& v) { return sum_all(mul(v, inf)); }, x, 1e-6),
                  NumericError);
}

TEST_CASE("composed matmul-softmax-cross-entropy gradient in both precisions") {
  Rng rng(5);
  auto run = [&](auto tag, double eps, double tol) {
    using T = decltype(tag);
    auto a = testutil::random_param<T>(rng, {4, 4});
    auto w = testutil::random_param<T>(rng, {4, 4});
    ParamList<T> ps{{"a", a}, {"w", w}};
    auto f = [&] { return cross_entropy(softmax(matmul(a, w)), std::vector<std::size_t>{0, 3, 1, 2}); };
    CHECK(grad_check_params<T>(f, ps, eps).max_error <= tol);
  };
  run(double{}, 1e-6, 1e-5);
  run(float{}, 1e-3, 1e-3);
}

TEST_CASE("first_non_finite names the offending op") {
  auto a = Tensor<float>::parameter({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  auto b = add(Tensor<float>::full({2}, 1.0f), mul_scalar(a, 2.0f));
  CHECK(first_non_finite(b) == "leaf " + shape_str({2}));
  auto c = Tensor<float>::parameter({2}, {1e30f, 1e30f});
  CHECK(first_non_finite(add_scalar(mul(c, c), 1.0f)) == "mul " + shape_str({2}));
  CHECK_FALSE(all_finite(b));
  CHECK(first_non_finite(add(Tensor<float>::full({2}, 1.0f), Tensor<float>::full({2}, 2.0f))).empty());
}

TEST_CASE("backward fault hook flips the sign of one op") {
  auto grad_of = [] {
    auto x = Tensor<double>::parameter({3}, {0.5, -1.0, 2.0});
    sum_all(gelu(x)).backward();
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto clean = grad_of();
  set_backward_fault("gelu");
  const auto faulty = grad_of();
  set_backward_fault("");
  for (std::size_t i = 0; i < clean.size(); ++i) CHECK(faulty[i] == -clean[i]);
  CHECK(grad_of() == clean);
}

TEST_CASE("same seed and op sequence give bit-identical values") {
  auto run = [] {
    Rng rng(99);
    auto x = testutil::random<float>(rng, {5, 6});
    auto w = testutil::random<float>(rng, {6, 3});
    return softmax(gelu(matmul(x, w)));
  };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("adam first step matches the bias-corrected closed form") {
  const std::vector<double> g = {0.3, -2.0, 1e-3, 0.0};
  auto theta = Tensor<double>::parameter({4}, {1.0, 1.0, 1.0, 1.0});
  AdamConfig cfg;
  cfg.lr = 0.01;
  Adam<double> opt({theta}, cfg);
  sum_all(mul(theta, Tensor<double>::from({4}, g))).backward();
  opt.step();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double expected = 1.0 - cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
    CHECK(theta[i] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("adam leaves parameters alone under zero gradient") {
  auto theta = Tensor<float>::parameter({3}, {1.5f, -2.0f, 0.25f});
  const std::vector<float> before(theta.values().begin(), theta.values().end());
  Adam<float> opt({theta});
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    opt.step();
  }
  CHECK(std::vector<float>(theta.values().begin(), theta.values().end()) == before);
}

TEST_CASE("adam minimizes a quadratic") {
  auto theta = Tensor<double>::parameter({1}, {0.0});
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam<double> opt({theta}, cfg);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto d = add_scalar(theta, -5.0);
    sum_all(mul(d, d)).backward();
    opt.step();
  }
  CHECK(std::abs(theta[0] - 5.0) < 0.1);
}

TEST_CASE("adam requires a gradient on every parameter") {
  auto a = Tensor<float>::parameter({1}, {1.0f});
  Adam<float> opt({a});
  CHECK_THROWS_AS(opt.step(), ValidationError);
}

TEST_CASE("rng streams are reproducible and restorable") {
  Rng a(42), b(42), c(43);
  std::vector<std::uint64_t> xa, xb, xc;
  for (int i = 0; i < 16; ++i) {
    xa.push_back(a.next_u64());
    xb.push_back(b.next_u64());
    xc.push_back(c.next_u64());
  }
  CHECK(xa == xb);
  CHECK(xa != xc);
  const std::string st = a.state();
  std::vector<double> first;
  for (int i = 0; i < 8; ++i) first.push_back(a.normal());
  Rng d(0);
  d.restore(42, st);
  for (int i = 0; i < 8; ++i) CHECK(d.normal() == first[i]);
  CHECK_THROWS_AS(d.restore(1, "garbage"), ValidationError);
}

TEST_CASE("rng distributions land in range with sensible moments") {
  Rng rng(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(rng.below(7) < 7);
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("container layout matches a hand-built byte string") {
  std::vector<NamedArray> entries{{"ab", {2}, {1.0f, -2.5f}}};
  const std::string bytes = encode_container(entries);
  std::string expected = "MTOK";
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) expected.push_back(char((v >> (8 * i)) & 0xff));
  };
  u32(1);
  u32(1);
  expected.push_back(2);
  expected.push_back(0);
  expected += "ab";
  u32(1);
  u32(2);
  for (float f : {1.0f, -2.5f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  CHECK(bytes == expected);
}

TEST_CASE("container round-trips random entries bit-exactly") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<NamedArray> entries;
    const std::size_t count = rng.below(4);
    for (std::size_t i = 0; i < count; ++i) {
      Shape shape;
      const std::size_t rank = rng.below(4);
      for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.below(4));
      entries.push_back({"e" + std::to_string(i), shape, rng.normal_vector<float>(shape_numel(shape))});
    }
    const auto back = decode_container(encode_container(entries));
    REQUIRE(back.size() == entries.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].name == entries[i].name);
      CHECK(back[i].shape == entries[i].shape);
      CHECK(std::memcmp(back[i].data.data(), entries[i].data.data(), back[i].data.size() * 4) == 0);
    }
  }
}

TEST_CASE("container rejects corrupt input") {
  const std::string good = encode_container({{"x", {3}, {1, 2, 3}}});
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_container(bad_magic), IoError);
  CHECK_THROWS_AS(decode_container(good.substr(0, good.size() - 2)), IoError);
  CHECK_THROWS_AS(decode_container(good + "z"), IoError);
  std::string bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_container(bad_version), IoError);
  CHECK_THROWS_AS(encode_container({{"x", {2, 2}, {1, 2, 3}}}), ValidationError);
  const auto entries = decode_container(good);
  CHECK_THROWS_AS(find_entry(entries, "missing"), IoError);
}

TEST_CASE("load_arrays copies by name and checks shapes") {
  auto p = Tensor<float>::parameter({2}, {0, 0});
  ParamList<float> ps{{"w", p}};
  load_arrays(ps, {{"w", {2}, {4.0f, 5.0f}}});
  CHECK(p[0] == 4.0f);
  CHECK(p[1] == 5.0f);
  CHECK_THROWS_AS(load_arrays(ps, {{"w", {3}, {1, 2, 3}}}), ValidationError);
  CHECK_THROWS_AS(load_arrays(ps, {{"v", {2}, {1, 2}}}), IoError);
}
