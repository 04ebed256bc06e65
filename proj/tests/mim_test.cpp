#include <cmath>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "io/images.hpp"
#include "numerics/gradcheck.hpp"
#include "training/runner.hpp"

using namespace mingtok;
using namespace mingtok::mim;
using nlohmann::json;
using testutil::bit_equal;

namespace {

template <typename T>
Tensor<T> random_image(Rng& rng, std::size_t res) {
  std::vector<T> v(res * res * 3);
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>::from({res, res, 3}, v);
}

template <typename T>
TeacherBundle<T> frozen_bundle(const tok::MingTokConfig& cfg, std::uint64_t seed) {
  return {std::make_shared<FrozenTeacher<T>>(cfg.resolution, cfg.base_patch, cfg.low.embed_dim, 1, seed),
          std::make_shared<FrozenTeacher<T>>(cfg.resolution, cfg.base_patch, cfg.semantic_dim(), 2, seed + 1)};
}

}  // namespace

TEST_CASE("sample_mask counts") {
  Rng rng(1);
  CHECK(sample_mask(16, 0.0, rng).masked_count() == 0);
  CHECK(sample_mask(16, 1.0, rng).masked_count() == 16);
  CHECK(sample_mask(16, 0.4, rng).masked_count() == 6);
  CHECK(sample_mask(16, 0.375, rng).masked_count() == 6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t total = 1 + rng.below(64);
    const double ratio = rng.uniform();
    auto plan = sample_mask(total, ratio, rng);
    CHECK(plan.masked.size() == total);
    CHECK(plan.masked_count() == static_cast<std::size_t>(std::llround(ratio * double(total))));
  }
  CHECK_THROWS_AS(sample_mask(16, 1.5, rng), ValidationError);
}

TEST_CASE("sample_mask is uniform over positions") {
  Rng rng(2);
  std::vector<int> hits(16, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto plan = sample_mask(16, 0.375, rng);
    for (std::size_t p = 0; p < 16; ++p) hits[p] += plan.masked[p];
  }
  for (int h : hits) CHECK(std::abs(double(h) / draws - 0.375) <= 0.02);
}

TEST_CASE("feature_loss is zero when the head reproduces the normalized teacher") {
  Rng rng(3);
  const std::size_t t = 6, d = 5;
  auto teacher = testutil::random<double>(rng, {t, d});
  vit::Linear<double> head(d, d, true, rng);
  auto w = head.weight.mutable_values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i / d == i % d) ? 1.0 : 0.0;
  testutil::zero_fill(head.bias);
  auto pred = nn::l2_normalize(teacher);
  tok::MaskPlan plan{t, {true, false, true, true, false, false}, 0.5};
  CHECK(feature_loss(pred, head, teacher, plan).item() <= 1e-30);
}

TEST_CASE("feature_loss ignores unmasked rows and matches a direct formula") {
  Rng rng(4);
  const std::size_t t = 8, dp = 4, dt = 3;
  vit::Linear<double> head(dp, dt, true, rng, 0.5);
  auto teacher = testutil::random<double>(rng, {t, dt});
  auto pred = testutil::random<double>(rng, {t, dp});
  tok::MaskPlan plan{t, {false, true, false, false, true, true, false, false}, 0.375};
  const double loss = feature_loss(pred, head, teacher, plan).item();
  auto out = head.forward(pred);
  double sum = 0;
  for (std::size_t r : plan.masked_positions()) {
    double norm = 0;
    for (std::size_t c = 0; c < dt; ++c) norm += teacher[r * dt + c] * teacher[r * dt + c];
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dt; ++c) {
      const double e = out[r * dt + c] - teacher[r * dt + c] / norm;
      sum += e * e;
    }
  }
  CHECK(loss == doctest::Approx(sum / (3.0 * dt)).epsilon(1e-12));
  std::vector<double> moved(pred.values().begin(), pred.values().end());
  for (std::size_t c = 0; c < dp; ++c) moved[0 * dp + c] += 3.0;
  CHECK(feature_loss(Tensor<double>::from(pred.shape(), moved), head, teacher, plan).item() == loss);
  tok::MaskPlan none{t, std::vector<bool>(t, false), 0.0};
  CHECK(feature_loss(pred, head, teacher, none).item() == 0.0);
}

TEST_CASE("ratio zero makes both passes identical") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  tok::MingTok<float> model(cfg, 5);
  Rng rng(6);
  auto teachers = frozen_bundle<float>(cfg, 7);
  PredictionHeads<float> heads(cfg.latent_dim, teachers.structural->dim(), cfg.semantic_dim(),
                               teachers.semantic->dim(), rng);
  auto img = random_image<float>(rng, cfg.resolution);
  auto plan = sample_mask(cfg.tokens(), 0.0, rng);
  auto terms = compute_losses(model, heads, img, plan, teachers.structural->features(img, "a"),
                              teachers.semantic->features(img, "a"), LossWeights{});
  CHECK(terms.l_latent.item() == 0.0f);
  CHECK(terms.l_semantic.item() == 0.0f);
  CHECK(terms.l_pixel_masked.item() == terms.l_pixel_unmasked.item());

  TrainOptions opt;
  opt.mask_ratio = 0.0;
  opt.seed = 8;
  MimTrainer<float> trainer(model, teachers, opt);
  for (int i = 0; i < 3; ++i) {
    auto report = trainer.train_step(img, "a");
    CHECK(report.l_pixel_masked == report.l_pixel_unmasked);
    CHECK(report.l_latent == 0.0);
  }
}

TEST_CASE("end-to-end loss gradient on the micro preset") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  tok::MingTok<double> model(cfg, 9);
  Rng rng(10);
  auto teachers = frozen_bundle<double>(cfg, 11);
  PredictionHeads<double> heads(cfg.latent_dim, teachers.structural->dim(), cfg.semantic_dim(),
                                teachers.semantic->dim(), rng);
  auto img = random_image<double>(rng, cfg.resolution);
  auto sf = teachers.structural->features(img, "k");
  auto ef = teachers.semantic->features(img, "k");
  auto plan = sample_mask(cfg.tokens(), 0.5, rng);
  nn::ParamList<double> probe;
  for (auto& p : model.parameters()) {
    if (p.name.find("mask") != std::string::npos || p.name.find("low.blocks.0.attn.qkv.weight") != std::string::npos ||
        p.name.find("pix.head") != std::string::npos || p.name.find("sem.blocks.0.ffn.up") != std::string::npos || p.name.find("shortcut") != std::string::npos)
      probe.push_back(p);
  }
  for (auto& p : heads.parameters()) probe.push_back(p);
  REQUIRE(probe.size() >= 11);
  auto f = [&] { return compute_losses(model, heads, img, plan, sf, ef, LossWeights{}).total; };
  CHECK(nn::grad_check_params<double>(f, probe, 1e-6).max_error <= 1e-3);
}

TEST_CASE("frozen teachers are deterministic and gradient-isolated") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  FrozenTeacher<float> teacher(cfg.resolution, cfg.base_patch, 12, 1, 12);
  FrozenTeacher<float> twin(cfg.resolution, cfg.base_patch, 12, 1, 12);
  Rng rng(13);
  auto img = random_image<float>(rng, cfg.resolution);
  auto a = teacher.features(img, "x");
  CHECK(a.shape() == nn::Shape{cfg.tokens(), 12});
  CHECK(bit_equal(a, teacher.features(img, "x")));
  CHECK(bit_equal(a, twin.features(img, "y")));

  tok::MingTok<float> model(cfg, 14);
  auto bundle = std::make_shared<FrozenTeacher<float>>(cfg.resolution, cfg.base_patch, 8, 1, 15);
  auto sem = std::make_shared<FrozenTeacher<float>>(cfg.resolution, cfg.base_patch, 16, 1, 16);
  std::vector<float> before;
  for (auto& p : bundle->parameters())
    for (float v : p.tensor.values()) before.push_back(v);
  MimTrainer<float> trainer(model, {bundle, sem}, TrainOptions{});
  for (int i = 0; i < 3; ++i) trainer.train_step(img, "x");
  std::vector<float> after;
  for (auto& p : bundle->parameters()) {
    CHECK_FALSE(p.tensor.has_grad());
    for (float v : p.tensor.values()) after.push_back(v);
  }
  CHECK(before == after);
}

TEST_CASE("file teachers round-trip and name missing keys") {
  auto dir = testutil::temp_dir("teacher_files");
  Rng rng(17);
  auto s = testutil::random<float>(rng, {4, 6});
  auto e = testutil::random<float>(rng, {4, 10});
  write_teacher_file(dir, "cat", s, e);
  FileTeacher<float> st(dir, "struct", 6), se(dir, "sem", 10);
  CHECK(bit_equal(st.features({}, "cat"), s));
  CHECK(bit_equal(se.features({}, "cat"), e));
  CHECK(teacher_file_dim(dir, "cat", "sem") == 10);
  try {
    st.features({}, "dog");
    FAIL("expected an error");
  } catch (const IoError& err) {
    CHECK(std::string(err.what()).find("dog") != std::string::npos);
  }
  FileTeacher<float> wrong(dir, "struct", 7);
  CHECK_THROWS_AS(wrong.features({}, "cat"), ValidationError);
}

TEST_CASE("loss report recombines its components") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  tok::MingTok<float> model(cfg, 18);
  TrainOptions opt;
  opt.weights = {0.5, 2.0, 1.5};
  opt.seed = 19;
  MimTrainer<float> trainer(model, frozen_bundle<float>(cfg, 20), opt);
  Rng rng(21);
  auto img = random_image<float>(rng, cfg.resolution);
  for (int i = 0; i < 3; ++i) {
    auto r = trainer.train_step(img, "i");
    CHECK(r.total == LossReport::combine(opt.weights, r.l_latent, r.l_semantic, r.l_pixel_masked, r.l_pixel_unmasked));
    auto j = r.to_json(7);
    CHECK(j.at("step") == 7);
    CHECK(j.contains("l_latent"));
    CHECK(j.contains("l_pixel_unmasked"));
  }
}

TEST_CASE("training lowers the loss") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  tok::MingTok<float> model(cfg, 22);
  TrainOptions opt;
  opt.lr = 3e-3;
  opt.seed = 23;
  MimTrainer<float> trainer(model, frozen_bundle<float>(cfg, 24), opt);
  auto set = io::load_images({}, "synthetic", cfg.resolution, 4, 25);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    auto r = trainer.train_step(set.images, set.keys);
    if (step == 0) first = r.l_pixel_unmasked;
    last = r.l_pixel_unmasked;
  }
  CHECK(last < first);
}

TEST_CASE("train_step rejects malformed batches") {
  auto cfg = tok::MingTokConfig::preset_named("micro");
  tok::MingTok<float> model(cfg, 26);
  MimTrainer<float> trainer(model, frozen_bundle<float>(cfg, 27), TrainOptions{});
  CHECK_THROWS_AS(trainer.train_step(Tensor<float>::zeros({4, 4, 3}), "x"), ValidationError);
}

TEST_CASE("training config validation") {
  json j = {{"preset", "micro"}, {"steps", 3}, {"zap", 1}, {"data", {{"format", "synthetic"}, {"zip", 2}}}};
  try {
    TrainConfig::from_json(j);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("zap") != std::string::npos);
  }
  json both = {{"preset", "micro"}, {"model", tok::MingTokConfig::preset_named("micro").to_json()}};
  CHECK_THROWS_AS(TrainConfig::from_json(both), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json(json::object()), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"preset", "micro"}, {"mask_ratio", 1.5}}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"preset", "micro"}, {"teacher", {{"mode", "files"}}}}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"preset", "micro"}, {"data", {{"format", "png"}}}}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"preset", "micro"}, {"steps", "many"}}), ValidationError);

  auto c = TrainConfig::from_json({{"preset", "micro"}, {"steps", 5}, {"seed", 9}, {"lr", 0.01}});
  CHECK(c.teacher.seed == 10);
  auto again = TrainConfig::from_json(c.to_json());
  CHECK(again.to_json() == c.to_json());
}

TEST_CASE("train_tokenizer writes one metrics line per step and is reproducible") {
  auto c = TrainConfig::from_json({{"preset", "micro"}, {"steps", 4}, {"batch", 2}, {"seed", 3}});
  std::ostringstream m1, m2;
  std::size_t seen = 0;
  auto a = train_tokenizer<float>(c, &m1, [&](const LossReport&, std::size_t) { ++seen; });
  auto b = train_tokenizer<float>(c, &m2);
  CHECK(seen == 4);
  CHECK(m1.str() == m2.str());
  std::istringstream lines(m1.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    auto rec = json::parse(line);
    CHECK(rec.at("step") == count + 1);
    ++count;
  }
  CHECK(count == 4);
  auto pa = a->parameters(), pb = b->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i].tensor, pb[i].tensor));
}
