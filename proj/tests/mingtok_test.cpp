#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "tokenizer/mingtok.hpp"

using namespace mingtok;
using namespace mingtok::tok;
using testutil::bit_equal;
using testutil::max_abs_diff;

namespace {

Tensor<float> random_image(Rng& rng, std::size_t res) {
  std::vector<float> v(res * res * 3);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from({res, res, 3}, v);
}

MaskPlan no_mask(std::size_t total) {
  MaskPlan p;
  p.total = total;
  p.masked.assign(total, false);
  return p;
}

}  // namespace

TEST_CASE("channel average and repeat") {
  auto x = Tensor<double>::from({1, 4}, {1, 2, 3, 4});
  auto avg = channel_average(x, 2);
  CHECK(avg[0] == 1.5);
  CHECK(avg[1] == 3.5);
  auto y = Tensor<double>::from({1, 2}, {-0.5, 2.0});
  auto rep = channel_repeat(y, 4);
  CHECK(std::vector<double>(rep.values().begin(), rep.values().end()) == std::vector<double>{-0.5, -0.5, 2.0, 2.0});
  CHECK_THROWS_AS(channel_average(Tensor<double>::zeros({1, 5}), 2), ValidationError);
  CHECK_THROWS_AS(channel_repeat(Tensor<double>::zeros({1, 3}), 4), ValidationError);
}

TEST_CASE("shortcuts with zero weights reduce to the parameter-free maps") {
  Rng rng(1);
  ChannelAverageShortcut<double> down(8, 2, rng);
  ChannelRepeatShortcut<double> up(2, 8, rng);
  testutil::zero_fill(down.proj.weight);
  testutil::zero_fill(up.proj.weight);
  if (down.proj.bias.defined()) testutil::zero_fill(down.proj.bias);
  auto c = down.forward(Tensor<double>::full({3, 8}, 0.625));
  for (double v : c.values()) CHECK(v == 0.625);
  auto x = Tensor<double>::from({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto d = down.forward(x);
  CHECK(d[0] == 2.5);
  CHECK(d[1] == 6.5);
  REQUIRE(up.proj.bias.defined());
  auto b = up.proj.bias.mutable_values();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.25 * double(i);
  auto z = up.forward(Tensor<double>::zeros({2, 2}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 8; ++i) CHECK(z[r * 8 + i] == b[i]);
}

TEST_CASE("preset accounting") {
  auto paper = MingTokConfig::preset_named("paper");
  CHECK(paper.resolution == 512);
  CHECK(paper.tokens() == 256);
  CHECK(paper.latent_dim == 32);
  CHECK(paper.semantic_dim() == 1024);
  CHECK(paper.pixel_tokens() == 1024);
  CHECK(paper.shuffled_dim() == 256);
  CHECK(paper.low.depth == 12);
  CHECK(paper.sem.depth == 24);
  CHECK(paper.pix.depth == 24);
  CHECK(paper.low.num_heads * paper.low.head_dim == paper.low.embed_dim);
  auto tiny = MingTokConfig::preset_named("tiny");
  CHECK(tiny.tokens() == 16);
  CHECK(tiny.latent_dim == 8);
  CHECK(tiny.pixel_tokens() == 64);
  for (const auto& name : preset_names()) {
    auto c = MingTokConfig::preset_named(name);
    CHECK(c.tokens() == (c.resolution / c.base_patch) * (c.resolution / c.base_patch));
  }
  CHECK_THROWS_AS(MingTokConfig::preset_named("huge"), ValidationError);
}

TEST_CASE("parameter count matches the instantiated model") {
  auto cfg = MingTokConfig::preset_named("tiny");
  MingTok<float> model(cfg, 3);
  std::size_t total = 0;
  for (auto& p : model.parameters()) total += p.tensor.numel();
  CHECK(total == cfg.parameter_count());
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  for (const auto& name : preset_names()) {
    auto c = MingTokConfig::preset_named(name);
    auto j = c.to_json();
    auto back = MingTokConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(MingTokConfig::from_json(back.to_json()).to_json() == j);
  }
  auto j = MingTokConfig::preset_named("micro").to_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(MingTokConfig::from_json(j), ValidationError);
  auto k = MingTokConfig::preset_named("micro").to_json();
  k.erase("latent_dim");
  CHECK_THROWS_AS(MingTokConfig::from_json(k), ValidationError);
}

TEST_CASE("tiny preset shapes through every stage") {
  auto cfg = MingTokConfig::preset_named("tiny");
  MingTok<float> model(cfg, 4);
  Rng rng(5);
  auto img = random_image(rng, 32);
  nn::NoGradGuard guard;
  auto lat = model.encode(img);
  CHECK(lat.count() == 16);
  CHECK(lat.tokens.shape() == nn::Shape{16, 8});
  auto sem = model.expand(lat);
  CHECK(sem.count() == lat.count());
  CHECK(sem.tokens.shape() == nn::Shape{16, 128});
  auto px = model.decode_pixels(sem);
  CHECK(px.shape() == img.shape());
  auto rec = model.reconstruct(img);
  CHECK(rec.shape() == img.shape());
  CHECK(nn::all_finite(rec));
  CHECK(bit_equal(rec, model.reconstruct(img)));
  CHECK_THROWS_AS(model.encode(Tensor<float>::zeros({16, 16, 3})), ValidationError);
  CHECK_THROWS_AS(model.expand(LatentSeq<float>{4, 4, Tensor<float>::zeros({16, 7})}), ValidationError);
  CHECK_THROWS_AS(model.decode_pixels(SemanticSeq<float>{2, 2, Tensor<float>::zeros({4, 128})}), ValidationError);
}

TEST_CASE("an empty mask is the same as no mask") {
  auto cfg = MingTokConfig::preset_named("micro");
  MingTok<float> model(cfg, 6);
  Rng rng(7);
  auto img = random_image(rng, cfg.resolution);
  auto plan = no_mask(cfg.tokens());
  CHECK(bit_equal(model.encode(img, &plan).tokens, model.encode(img).tokens));
  plan.masked[1] = true;
  CHECK(max_abs_diff(model.encode(img, &plan).tokens, model.encode(img).tokens) > 0);
}

TEST_CASE("expand is causal in raster order") {
  auto cfg = MingTokConfig::preset_named("tiny");
  MingTok<float> model(cfg, 8);
  Rng rng(9);
  nn::NoGradGuard guard;
  for (int trial = 0; trial < 6; ++trial) {
    auto lat = testutil::random<float>(rng, {cfg.tokens(), cfg.latent_dim});
    const std::size_t j = rng.below(cfg.tokens());
    auto base = model.expand({cfg.grid(), cfg.grid(), lat}).tokens;
    std::vector<float> v(lat.values().begin(), lat.values().end());
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) v[j * cfg.latent_dim + c] += 0.3f * float(c + 1);
    auto moved = model.expand({cfg.grid(), cfg.grid(), Tensor<float>::from(lat.shape(), v)}).tokens;
    CHECK(testutil::bit_equal_rows(base, moved, j));
    CHECK(max_abs_diff(nn::slice(base, 0, j, j + 1), nn::slice(moved, 0, j, j + 1)) > 0);
  }
}

TEST_CASE("expand_step matches expand") {
  auto cfg = MingTokConfig::preset_named("tiny");
  MingTok<float> model(cfg, 10);
  Rng rng(11);
  nn::NoGradGuard guard;
  auto lat = testutil::random<float>(rng, {cfg.tokens(), cfg.latent_dim});
  auto full = model.expand({cfg.grid(), cfg.grid(), lat}).tokens;
  auto state = model.begin_expand();
  CHECK(state.position == 0);
  std::vector<Tensor<float>> rows;
  for (std::size_t i = 0; i < cfg.tokens(); ++i) {
    auto s = model.expand_step(state, nn::reshape(nn::slice(lat, 0, i, i + 1), {cfg.latent_dim}));
    CHECK(s.shape() == nn::Shape{cfg.semantic_dim()});
    CHECK(state.position == i + 1);
    if (i == 0) CHECK(max_abs_diff(nn::reshape(s, {1, cfg.semantic_dim()}), nn::slice(full, 0, 0, 1)) <= 1e-6);
    rows.push_back(nn::reshape(s, {1, cfg.semantic_dim()}));
  }
  CHECK(max_abs_diff(nn::concat(rows, 0), full) <= 1e-5);
  CHECK_THROWS_AS(model.expand_step(state, nn::reshape(nn::slice(lat, 0, 0, 1), {cfg.latent_dim})), ValidationError);
  CHECK(max_abs_diff(model.expand_prefix(nn::slice(lat, 0, 0, 5)), nn::slice(full, 0, 0, 5)) <= 1e-5);
}

TEST_CASE("every parameter receives gradient from a masked pixel loss") {
  auto cfg = MingTokConfig::preset_named("micro");
  MingTok<double> model(cfg, 12);
  Rng rng(13);
  std::vector<double> px(cfg.resolution * cfg.resolution * 3);
  for (auto& v : px) v = rng.uniform();
  auto img = Tensor<double>::from({cfg.resolution, cfg.resolution, 3}, px);
  auto plan = no_mask(cfg.tokens());
  plan.masked[0] = plan.masked[3] = true;
  auto out = model.decode_pixels(model.expand(model.encode(img, &plan)));
  nn::l1_loss(out, img).backward();
  std::size_t zero_grad = 0;
  std::string first;
  for (auto& p : model.parameters()) {
    bool any = false;
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) any = any || g != 0.0;
    if (!any) {
      ++zero_grad;
      if (first.empty()) first = p.name;
    }
  }
  INFO("first zero-grad parameter: " << first);
  CHECK(zero_grad == 0);
}

TEST_CASE("call counters") {
  auto cfg = MingTokConfig::preset_named("micro");
  MingTok<float> model(cfg, 14);
  Rng rng(15);
  auto img = random_image(rng, cfg.resolution);
  nn::NoGradGuard guard;
  model.reconstruct(img);
  auto c = model.counts();
  CHECK(c.encode == 1);
  CHECK(c.expand == 1);
  CHECK(c.decode == 1);
  model.reset_counts();
  CHECK(model.counts().encode == 0);
}

TEST_CASE("checkpoint round-trip") {
  auto dir = testutil::temp_dir("tok_ckpt");
  auto cfg = MingTokConfig::preset_named("micro");
  MingTok<float> model(cfg, 16);
  model.save(dir / "tok.mtok");
  CHECK(std::filesystem::exists(sidecar_path(dir / "tok.mtok")));
  auto loaded = MingTok<float>::load(dir / "tok.mtok");
  CHECK(loaded->config().to_json() == cfg.to_json());
  CHECK(loaded->seed() == 16);
  auto a = model.parameters(), b = loaded->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(bit_equal(a[i].tensor, b[i].tensor));
  }
  Rng rng(17);
  auto img = random_image(rng, cfg.resolution);
  nn::NoGradGuard guard;
  CHECK(bit_equal(model.reconstruct(img), loaded->reconstruct(img)));
  CHECK_THROWS(MingTok<float>::load(dir / "missing.mtok"));
}
