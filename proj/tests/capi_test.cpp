#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "mingtok/mingtok.h"

namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  mt_string_free(s);
  return out;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mingtok_capi_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("inspect and budget through the C API") {
  char* out = nullptr;
  REQUIRE(mt_inspect_preset("paper", &out) == MT_OK);
  auto j = nlohmann::json::parse(take(out));
  CHECK(j.dump().find("256") != std::string::npos);
  CHECK(mt_inspect_preset("huge", &out) == MT_ERR_VALIDATION);
  CHECK(std::string(mt_last_error()).find("huge") != std::string::npos);

  size_t n = 0;
  REQUIRE(mt_visual_token_count(MT_ARCH_HYBRID, 3, 256, &n) == MT_OK);
  CHECK(n == 2304);
  REQUIRE(mt_visual_token_count(MT_ARCH_UNIFIED, 3, 256, &n) == MT_OK);
  CHECK(n == 768);
  double r = 0;
  REQUIRE(mt_token_reduction(MT_ARCH_UNIFIED, MT_ARCH_SEPARATE, 3, 256, &r) == MT_OK);
  CHECK(r == doctest::Approx(0.5));
  CHECK(mt_token_reduction(MT_ARCH_UNIFIED, MT_ARCH_SEPARATE, 0, 256, &r) == MT_ERR_VALIDATION);
  CHECK(mt_visual_token_count(7, 1, 1, &n) == MT_ERR_VALIDATION);
  CHECK(mt_visual_token_count(MT_ARCH_UNIFIED, 1, 1, nullptr) == MT_ERR_VALIDATION);
}

TEST_CASE("tokenizer handle round trip") {
  mt_tokenizer* tok = nullptr;
  REQUIRE(mt_tokenizer_create("micro", 5, &tok) == MT_OK);
  size_t res = 0, tokens = 0, ld = 0, sd = 0;
  REQUIRE(mt_tokenizer_dims(tok, &res, &tokens, &ld, &sd) == MT_OK);
  CHECK(res == 8);
  CHECK(tokens == 4);
  std::vector<float> px(res * res * 3);
  for (size_t i = 0; i < px.size(); ++i) px[i] = float(i % 7) / 7.0f;
  std::vector<float> lat(tokens * ld), sem(tokens * sd), rec(px.size()), rec2(px.size());
  REQUIRE(mt_tokenizer_encode(tok, px.data(), lat.data()) == MT_OK);
  REQUIRE(mt_tokenizer_expand(tok, lat.data(), sem.data()) == MT_OK);
  REQUIRE(mt_tokenizer_decode(tok, sem.data(), rec.data()) == MT_OK);
  REQUIRE(mt_tokenizer_reconstruct(tok, px.data(), rec2.data()) == MT_OK);
  CHECK(std::memcmp(rec.data(), rec2.data(), rec.size() * sizeof(float)) == 0);
  mt_counters c{};
  REQUIRE(mt_tokenizer_counters(tok, &c) == MT_OK);
  CHECK(c.encode_calls == 2);
  CHECK(c.decode_calls == 2);

  auto dir = fresh_dir("tok");
  REQUIRE(mt_tokenizer_save(tok, (dir / "t.mtok").c_str()) == MT_OK);
  mt_tokenizer* back = nullptr;
  REQUIRE(mt_tokenizer_load((dir / "t.mtok").c_str(), &back) == MT_OK);
  std::vector<float> rec3(px.size());
  REQUIRE(mt_tokenizer_reconstruct(back, px.data(), rec3.data()) == MT_OK);
  CHECK(std::memcmp(rec.data(), rec3.data(), rec.size() * sizeof(float)) == 0);
  CHECK(mt_tokenizer_load((dir / "none.mtok").c_str(), &back) != MT_OK);
  CHECK(std::string(mt_last_error()).find("none.mtok") != std::string::npos);
  mt_tokenizer_free(back);
  mt_tokenizer_free(tok);
  mt_tokenizer_free(nullptr);
  CHECK(mt_tokenizer_create("{\"bogus\":1}", 1, &tok) == MT_ERR_VALIDATION);
}

TEST_CASE("non-finite input reports a numeric error") {
  mt_tokenizer* tok = nullptr;
  REQUIRE(mt_tokenizer_create("micro", 5, &tok) == MT_OK);
  std::vector<float> px(8 * 8 * 3, 0.5f), lat(4 * 4);
  px[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK(mt_tokenizer_encode(tok, px.data(), lat.data()) == MT_ERR_NUMERIC);
  mt_tokenizer_free(tok);
}

TEST_CASE("gradient check and fault injection") {
  char* report = nullptr;
  REQUIRE(mt_gradcheck(0, &report) == MT_OK);
  auto r = nlohmann::json::parse(take(report));
  CHECK(r.at("cases").size() > 10);
  REQUIRE(mt_debug_set_backward_fault("gelu") == MT_OK);
  CHECK(mt_gradcheck(0, &report) == MT_ERR_CHECK);
  auto bad = nlohmann::json::parse(take(report));
  bool named = false;
  for (const auto& c : bad.at("cases"))
    if (!c.at("passed").get<bool>() && c.at("case").get<std::string>().find("gelu") != std::string::npos) named = true;
  CHECK(named);
  REQUIRE(mt_debug_set_backward_fault("") == MT_OK);
}

TEST_CASE("training, generation and sessions through the C API") {
  auto dir = fresh_dir("unified");
  const std::string tok_cfg = R"({"preset":"micro","steps":3,"batch":2,"seed":3,
    "data":{"format":"synthetic","count":2}})";
  REQUIRE(mt_train_tokenizer(tok_cfg.c_str(), dir.c_str(), (dir / "tok.mtok").c_str(),
                             (dir / "tok_metrics.jsonl").c_str()) == MT_OK);
  std::ifstream metrics(dir / "tok_metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(metrics, line)) ++lines;
  CHECK(lines == 3);

  const std::string uni_cfg = R"({"tokenizer":"tok.mtok","steps":2,"batch":2,"seed":4,
    "backbone":{"width":16,"depth":1,"heads":2,"max_context":64},
    "data":{"format":"synthetic","count":2}})";
  const int st = mt_train_unified(uni_cfg.c_str(), dir.c_str(), (dir / "uni.mtok").c_str(), nullptr);
  INFO(mt_last_error());
  REQUIRE(st == MT_OK);

  mt_unified* model = nullptr;
  REQUIRE(mt_unified_load((dir / "uni.mtok").c_str(), &model) == MT_OK);
  char* info = nullptr;
  REQUIRE(mt_generate(model, "a cat", 3, 7, (dir / "g1.mtok").c_str(), &info) == MT_OK);
  auto a = nlohmann::json::parse(take(info));
  REQUIRE(mt_generate(model, "a cat", 3, 7, (dir / "g2.mtok").c_str(), &info) == MT_OK);
  auto b = nlohmann::json::parse(take(info));
  CHECK(a == b);

  mt_session* s = nullptr;
  REQUIRE(mt_session_create(model, &s) == MT_OK);
  std::vector<float> px(8 * 8 * 3, 0.25f), out(px.size());
  size_t idx = 9;
  REQUIRE(mt_session_add_text(s, "look") == MT_OK);
  REQUIRE(mt_session_add_image(s, px.data(), &idx) == MT_OK);
  CHECK(idx == 0);
  REQUIRE(mt_session_generate(s, "edit", 2, 1, &idx) == MT_OK);
  CHECK(idx == 1);
  REQUIRE(mt_session_render(s, 1, out.data()) == MT_OK);
  CHECK(mt_session_render(s, 5, out.data()) == MT_ERR_VALIDATION);
  mt_counters c{};
  REQUIRE(mt_session_counters(s, &c) == MT_OK);
  CHECK(c.encode_calls == 1);
  CHECK(c.decode_calls == 1);
  size_t len = 0;
  REQUIRE(mt_session_context_length(s, &len) == MT_OK);
  CHECK(len == 4 + 6 + 4 + 6);
  mt_session_free(s);

  {
    std::ofstream script(dir / "s.jsonl");
    script << R"({"op":"add_image","synthetic":1})" << '\n'
           << R"({"op":"generate","text":"x","K":2,"seed":3})" << '\n'
           << R"({"op":"render","image":1,"out":"r"})" << '\n';
  }
  REQUIRE(mt_session_run_script(model, (dir / "s.jsonl").c_str(), (dir / "o1").c_str(),
                                (dir / "t1.jsonl").c_str()) == MT_OK);
  REQUIRE(mt_session_run_script(model, (dir / "s.jsonl").c_str(), (dir / "o2").c_str(),
                                (dir / "t2.jsonl").c_str()) == MT_OK);
  std::ifstream t1(dir / "t1.jsonl"), t2(dir / "t2.jsonl");
  std::string s1((std::istreambuf_iterator<char>(t1)), {}), s2((std::istreambuf_iterator<char>(t2)), {});
  CHECK(!s1.empty());
  CHECK(s1 == s2);
  mt_unified_free(model);
}
