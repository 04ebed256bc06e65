#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "numerics/gradcheck.hpp"
#include "vit/blocks.hpp"

using namespace mingtok;
using namespace mingtok::vit;
using nn::ParamList;
using testutil::bit_equal;
using testutil::max_abs_diff;

namespace {

BlockConfig small_config(std::size_t dim, std::size_t depth, std::size_t heads, AttentionMode mode) {
  BlockConfig c;
  c.embed_dim = dim;
  c.depth = depth;
  c.num_heads = heads;
  c.head_dim = dim / heads;
  c.attention = mode;
  return c;
}

template <typename T>
void perturb_row(Tensor<T>& x, std::size_t row, T delta) {
  auto v = x.mutable_values();
  for (std::size_t c = 0; c < x.dim(1); ++c) v[row * x.dim(1) + c] += delta * T(c % 3 + 1);
}

// Independent index-arithmetic version of channel-to-space.
template <typename T>
std::vector<T> shuffle_oracle(const TokenGrid<T>& g, std::size_t r) {
  const std::size_t d = g.channels(), c = d / (r * r), cols = g.cols * r;
  std::vector<T> out(g.count() * d);
  for (std::size_t gr = 0; gr < g.rows; ++gr)
    for (std::size_t gc = 0; gc < g.cols; ++gc)
      for (std::size_t a = 0; a < r; ++a)
        for (std::size_t s = 0; s < r; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t dst = ((gr * r + a) * cols + gc * r + s) * c + ch;
            const std::size_t src = (gr * g.cols + gc) * d + (a * r + s) * c + ch;
            out[dst] = g.tokens[src];
          }
  return out;
}

}  // namespace

TEST_CASE("patch grids for both resolutions") {
  Rng rng(1);
  PatchEmbed<float> paper(512, 32, 4, rng);
  CHECK(paper.grid() == 16);
  CHECK(paper.grid() * paper.grid() == 256);
  PatchEmbed<float> tiny(32, 8, 4, rng);
  auto g = tiny.forward(Tensor<float>::zeros({32, 32, 3}));
  CHECK(g.rows == 4);
  CHECK(g.cols == 4);
  CHECK(g.count() == 16);
  CHECK(g.tokens.shape() == nn::Shape{16, 4});
  CHECK_THROWS_AS(PatchEmbed<float>(30, 8, 4, rng), ValidationError);
  CHECK_THROWS_AS(tiny.forward(Tensor<float>::zeros({16, 16, 3})), ValidationError);
}

TEST_CASE("zero image with zero positions yields the projection bias") {
  Rng rng(2);
  PatchEmbed<double> pe(16, 4, 6, rng);
  testutil::zero_fill(pe.pos.row);
  testutil::zero_fill(pe.pos.col);
  auto bias = pe.proj.bias.mutable_values();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * double(i) - 0.2;
  auto g = pe.forward(Tensor<double>::zeros({16, 16, 3}));
  for (std::size_t t = 0; t < g.count(); ++t)
    for (std::size_t c = 0; c < 6; ++c) CHECK(g.tokens[t * 6 + c] == bias[c]);
}

TEST_CASE("image_to_patches follows raster order and inverts exactly") {
  Rng rng(3);
  auto img = testutil::random<float>(rng, {8, 12, 3});
  auto p = image_to_patches(img, 4);
  REQUIRE(p.shape() == nn::Shape{6, 48});
  // patch (1,2), pixel (py=3, px=1), channel 2
  const std::size_t y = 1 * 4 + 3, x = 2 * 4 + 1;
  CHECK(p[(1 * 3 + 2) * 48 + (3 * 4 + 1) * 3 + 2] == img[(y * 12 + x) * 3 + 2]);
  CHECK(bit_equal(patches_to_image(p, 2, 3, 4), img));
}

TEST_CASE("single token attention equals the projected value") {
  Rng rng(4);
  for (auto mode : {AttentionMode::Full, AttentionMode::Causal}) {
    Attention<double> attn(8, 2, rng);
    auto x = testutil::random<double>(rng, {1, 8});
    auto v = nn::slice(attn.qkv.forward(x), 1, 16, 24);
    CHECK(max_abs_diff(attn.forward(x, mode), attn.proj.forward(v)) <= 1e-14);
  }
}

TEST_CASE("full attention over identical tokens gives identical outputs") {
  Rng rng(5);
  Attention<double> attn(8, 2, rng);
  auto row = testutil::random<double>(rng, {1, 8});
  auto y = attn.forward(nn::concat<double>({row, row}, 0), AttentionMode::Full);
  for (std::size_t c = 0; c < 8; ++c) CHECK(y[c] == y[8 + c]);
}

TEST_CASE("causal stacks ignore later positions") {
  Rng rng(6);
  BlockStack<float> stack(small_config(16, 2, 4, AttentionMode::Causal), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + rng.below(6), j = rng.below(n);
    auto x = testutil::random<float>(rng, {n, 16});
    auto y = stack.forward(x);
    auto xp = Tensor<float>::from(x.shape(), std::vector<float>(x.values().begin(), x.values().end()));
    perturb_row(xp, j, 0.7f);
    auto yp = stack.forward(xp);
    CHECK(testutil::bit_equal_rows(y, yp, j));
    CHECK(max_abs_diff(nn::slice(y, 0, j, n), nn::slice(yp, 0, j, n)) > 0);
  }
}

TEST_CASE("full attention stacks see every position") {
  Rng rng(7);
  BlockStack<float> stack(small_config(16, 1, 2, AttentionMode::Full), rng);
  auto x = testutil::random<float>(rng, {4, 16});
  auto xp = Tensor<float>::from(x.shape(), std::vector<float>(x.values().begin(), x.values().end()));
  perturb_row(xp, 3, 0.5f);
  CHECK(max_abs_diff(nn::slice(stack.forward(x), 0, 0, 1), nn::slice(stack.forward(xp), 0, 0, 1)) > 0);
}

TEST_CASE("cached incremental steps match the full causal pass") {
  Rng rng(8);
  BlockStack<float> stack(small_config(16, 2, 2, AttentionMode::Causal), rng);
  auto x = testutil::random<float>(rng, {7, 16});
  auto full = stack.forward(x);
  auto cache = stack.empty_cache();
  std::vector<Tensor<float>> rows;
  rows.push_back(stack.step(nn::slice(x, 0, 0, 3), cache));
  for (std::size_t i = 3; i < 7; ++i) rows.push_back(stack.step(nn::slice(x, 0, i, i + 1), cache));
  CHECK(max_abs_diff(nn::concat(rows, 0), full) <= 1e-5);
  CHECK(cache[0].length() == 7);
}

TEST_CASE("causal mask values") {
  auto m = causal_mask<float>(2, 3);
  REQUIRE(m.shape() == nn::Shape{2, 5});
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK((m[c] == 0.0f) == (c <= 3));
    CHECK((m[5 + c] == 0.0f) == (c <= 4));
  }
}

TEST_CASE("swiglu with zero weights outputs zeros") {
  Rng rng(9);
  SwiGLU<double> ffn(6, 16, rng);
  testutil::zero_fill(ffn.gate.weight);
  testutil::zero_fill(ffn.up.weight);
  testutil::zero_fill(ffn.down.weight);
  auto y = ffn.forward(testutil::random<double>(rng, {3, 6}));
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("swiglu with a saturated gate is linear in the up and down maps") {
  Rng rng(10);
  const std::size_t dim = 4, hidden = 8;
  SwiGLU<double> ffn(dim, hidden, rng);
  // x = e0; every gate pre-activation is 10, so silu = 10 * sigmoid(10).
  auto gw = ffn.gate.weight.mutable_values();
  for (std::size_t i = 0; i < gw.size(); ++i) gw[i] = (i < hidden) ? 10.0 : 0.0;
  std::vector<double> e0(dim, 0.0);
  e0[0] = 1.0;
  auto x = Tensor<double>::from({1, dim}, e0);
  auto linear = nn::mul_scalar(ffn.down.forward(ffn.up.forward(x)), 10.0);
  auto y = ffn.forward(x);
  CHECK(max_abs_diff(y, linear) <= 1e-3 * std::max(1.0, max_abs_diff(linear, Tensor<double>::zeros({1, dim}))));
}

TEST_CASE("blocks with zero inner weights are the identity") {
  Rng rng(11);
  for (auto mode : {AttentionMode::Full, AttentionMode::Causal}) {
    Block<float> block(small_config(8, 1, 2, mode), rng);
    ParamList<float> ps;
    block.collect(ps, "b");
    for (auto& p : ps) {
      if (p.name.find("norm") == std::string::npos) testutil::zero_fill(p.tensor);
    }
    auto x = testutil::random<float>(rng, {5, 8});
    CHECK(bit_equal(block.forward(x, mode), x));
  }
}

TEST_CASE("full block gradient check") {
  Rng rng(12);
  Block<double> block(small_config(8, 1, 2, AttentionMode::Causal), rng);
  ParamList<double> ps;
  block.collect(ps, "b");
  auto x = testutil::random_param<double>(rng, {4, 8});
  ps.push_back({"x", x});
  auto w = testutil::random<double>(rng, {4, 8});
  auto f = [&] { return nn::sum_all(nn::mul(block.forward(x, AttentionMode::Causal), w)); };
  CHECK(nn::grad_check_params<double>(f, ps, 1e-6).max_error <= 1e-3);
}

TEST_CASE("block config sizing and validation") {
  auto c = small_config(64, 2, 2, AttentionMode::Full);
  CHECK(c.ffn_hidden() == 176);
  CHECK(c.ffn_hidden() % 8 == 0);
  c.head_dim = 16;
  CHECK_THROWS_AS(c.validate("x"), ValidationError);
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t heads = 1 + rng.below(3);
    auto cfg = small_config(heads * (2 + rng.below(4)), 1 + rng.below(3), heads, AttentionMode::Causal);
    BlockStack<float> s(cfg, rng);
    ParamList<float> ps;
    s.collect(ps, "s");
    std::size_t total = 0;
    for (auto& p : ps) total += p.tensor.numel();
    CHECK(total == cfg.parameter_count());
  }
}

TEST_CASE("grid_shuffle at full-size preset scale") {
  TokenGrid<float> g{16, 16, Tensor<float>::zeros({256, 1024})};
  auto s = grid_shuffle(g, 2);
  CHECK(s.rows == 32);
  CHECK(s.cols == 32);
  CHECK(s.channels() == 256);
  CHECK(s.count() == 1024);
}

TEST_CASE("grid_shuffle with r=1 is the identity") {
  Rng rng(14);
  TokenGrid<float> g{3, 5, testutil::random<float>(rng, {15, 7})};
  CHECK(bit_equal(grid_shuffle(g, 1).tokens, g.tokens));
  CHECK(bit_equal(grid_unshuffle(g, 1).tokens, g.tokens));
}

TEST_CASE("grid_shuffle matches the index oracle and round-trips") {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t r = 1 + rng.below(3), rows = 1 + rng.below(4), cols = 1 + rng.below(4);
    const std::size_t d = r * r * (1 + rng.below(4));
    TokenGrid<float> g{rows, cols, testutil::random<float>(rng, {rows * cols, d})};
    auto s = grid_shuffle(g, r);
    REQUIRE(s.count() == g.count() * r * r);
    CHECK(std::vector<float>(s.tokens.values().begin(), s.tokens.values().end()) == shuffle_oracle(g, r));
    auto back = grid_unshuffle(s, r);
    CHECK(back.rows == rows);
    CHECK(bit_equal(back.tokens, g.tokens));
    std::vector<float> a(g.tokens.values().begin(), g.tokens.values().end());
    std::vector<float> b(s.tokens.values().begin(), s.tokens.values().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  TokenGrid<float> g{4, 4, testutil::random<float>(rng, {16, 16})};
  CHECK(bit_equal(grid_unshuffle(grid_shuffle(g, 2), 2).tokens, g.tokens));
}

TEST_CASE("grid_shuffle rejects indivisible shapes") {
  TokenGrid<float> g{2, 2, Tensor<float>::zeros({4, 6})};
  CHECK_THROWS_AS(grid_shuffle(g, 2), ValidationError);
  TokenGrid<float> h{3, 3, Tensor<float>::zeros({9, 4})};
  CHECK_THROWS_AS(grid_unshuffle(h, 2), ValidationError);
}
