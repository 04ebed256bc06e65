#include "mingtok/mingtok.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "io/images.hpp"
#include "session/session.hpp"
#include "training/gradsuite.hpp"
#include "training/runner.hpp"
#include "unified/trainer.hpp"

using namespace mingtok;
using json = nlohmann::json;

struct mt_tokenizer {
  std::unique_ptr<tok::MingTok<float>> model;
};

struct mt_unified {
  std::unique_ptr<tok::MingTok<float>> tokenizer;
  std::unique_ptr<ar::UnifiedModel<float>> model;
};

struct mt_session {
  explicit mt_session(const mt_unified* u) : state(*u->tokenizer, u->model.get()) {}
  session::Session<float> state;
};

namespace {

thread_local std::string g_error;

template <typename F>
int guarded(F&& f) {
  g_error.clear();
  try {
    f();
    return MT_OK;
  } catch (const NumericError& e) {
    g_error = e.what();
    return MT_ERR_NUMERIC;
  } catch (const json::exception& e) {
    g_error = std::string("json: ") + e.what();
    return MT_ERR_VALIDATION;
  } catch (const std::exception& e) {
    g_error = e.what();
    return MT_ERR_VALIDATION;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw ValidationError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_string(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

json parse_json(const char* text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

session::ArchitectureKind arch(int a) {
  if (a < 1 || a > 3) throw ValidationError("unknown architecture id " + std::to_string(a));
  return static_cast<session::ArchitectureKind>(a);
}

nn::Tensor<float> image_from(const tok::MingTokConfig& c, const float* pixels) {
  const std::size_t n = c.resolution * c.resolution * 3;
  return nn::Tensor<float>::from({c.resolution, c.resolution, 3}, std::vector<float>(pixels, pixels + n));
}

void copy_out(const nn::Tensor<float>& t, float* out) {
  auto v = t.values();
  std::copy(v.begin(), v.end(), out);
}

void write_image(const std::filesystem::path& p, const nn::Tensor<float>& image) {
  if (p.extension() == ".mtok") {
    io::write_image_tensor(p, image);
  } else if (p.extension() == ".png") {
    io::write_png(p, image);
  } else {
    throw ValidationError("output '" + p.string() + "' must end in .png or .mtok");
  }
}

json metrics_json(double psnr, double ssim) {
  json j;
  j["psnr"] = std::isinf(psnr) ? json("inf") : json(psnr);
  j["ssim"] = ssim;
  return j;
}

std::ofstream open_out(const char* path) {
  std::ofstream os(path);
  if (!os) throw IoError(std::string("cannot write '") + path + "'");
  return os;
}

mt_counters to_c(const session::Counters& c) { return mt_counters{c.encode, c.decode, c.expand}; }

}  // namespace

extern "C" {

const char* mt_last_error(void) { return g_error.c_str(); }

void mt_string_free(char* s) { std::free(s); }

const char* mt_version(void) { return "0.1.0"; }

int mt_inspect_preset(const char* preset, char** json_out) {
  return guarded([&] {
    need(preset, "preset");
    const auto c = tok::MingTokConfig::preset_named(preset);
    json j{{"config", c.to_json()},
           {"grid", c.grid()},
           {"tokens", c.tokens()},
           {"latent_dim", c.latent_dim},
           {"semantic_dim", c.semantic_dim()},
           {"shuffle_factor", c.shuffle_factor()},
           {"pixel_grid", c.pixel_grid()},
           {"pixel_tokens", c.pixel_tokens()},
           {"shuffled_dim", c.shuffled_dim()},
           {"depths", json{{"low", c.low.depth}, {"sem", c.sem.depth}, {"pix", c.pix.depth}}},
           {"parameters", json{{"low_blocks", c.low.parameter_count()},
                               {"sem_blocks", c.sem.parameter_count()},
                               {"pix_blocks", c.pix.parameter_count()},
                               {"total", c.parameter_count()}}}};
    put_string(json_out, j.dump());
  });
}

int mt_visual_token_count(int architecture, size_t images, size_t tokens_per_image, size_t* out) {
  return guarded([&] {
    need(out, "out");
    *out = session::visual_token_count(arch(architecture), images, tokens_per_image);
  });
}

int mt_token_reduction(int architecture, int baseline, size_t images, size_t tokens_per_image, double* out) {
  return guarded([&] {
    need(out, "out");
    *out = session::token_reduction(arch(architecture), arch(baseline), images, tokens_per_image);
  });
}

int mt_tokenizer_create(const char* config, uint64_t seed, mt_tokenizer** out) {
  return guarded([&] {
    need(config, "config");
    need(out, "out");
    const std::string s(config);
    const auto c = s.find('{') == std::string::npos ? tok::MingTokConfig::preset_named(s)
                                                    : tok::MingTokConfig::from_json(parse_json(config, "config"));
    *out = new mt_tokenizer{std::make_unique<tok::MingTok<float>>(c, seed)};
  });
}

int mt_tokenizer_load(const char* path, mt_tokenizer** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new mt_tokenizer{tok::MingTok<float>::load(path)};
  });
}

int mt_tokenizer_save(const mt_tokenizer* t, const char* path) {
  return guarded([&] {
    need(t, "tokenizer");
    need(path, "path");
    t->model->save(path);
  });
}

void mt_tokenizer_free(mt_tokenizer* t) { delete t; }

int mt_tokenizer_config(const mt_tokenizer* t, char** json_out) {
  return guarded([&] {
    need(t, "tokenizer");
    put_string(json_out, t->model->config().to_json().dump());
  });
}

int mt_tokenizer_dims(const mt_tokenizer* t, size_t* resolution, size_t* tokens, size_t* latent_dim,
                      size_t* semantic_dim) {
  return guarded([&] {
    need(t, "tokenizer");
    const auto& c = t->model->config();
    if (resolution) *resolution = c.resolution;
    if (tokens) *tokens = c.tokens();
    if (latent_dim) *latent_dim = c.latent_dim;
    if (semantic_dim) *semantic_dim = c.semantic_dim();
  });
}

int mt_tokenizer_encode(const mt_tokenizer* t, const float* pixels, float* latents) {
  return guarded([&] {
    need(t, "tokenizer");
    need(pixels, "pixels");
    need(latents, "latents");
    nn::NoGradGuard g;
    copy_out(t->model->encode(image_from(t->model->config(), pixels)).tokens, latents);
  });
}

int mt_tokenizer_expand(const mt_tokenizer* t, const float* latents, float* semantics) {
  return guarded([&] {
    need(t, "tokenizer");
    need(latents, "latents");
    need(semantics, "semantics");
    nn::NoGradGuard g;
    const auto& c = t->model->config();
    const std::size_t n = c.tokens() * c.latent_dim;
    tok::LatentSeq<float> seq{c.grid(), c.grid(),
                              nn::Tensor<float>::from({c.tokens(), c.latent_dim}, std::vector<float>(latents, latents + n))};
    copy_out(t->model->expand(seq).tokens, semantics);
  });
}

int mt_tokenizer_decode(const mt_tokenizer* t, const float* semantics, float* pixels) {
  return guarded([&] {
    need(t, "tokenizer");
    need(semantics, "semantics");
    need(pixels, "pixels");
    nn::NoGradGuard g;
    const auto& c = t->model->config();
    const std::size_t n = c.tokens() * c.semantic_dim();
    tok::SemanticSeq<float> seq{
        c.grid(), c.grid(),
        nn::Tensor<float>::from({c.tokens(), c.semantic_dim()}, std::vector<float>(semantics, semantics + n))};
    copy_out(t->model->decode_pixels(seq), pixels);
  });
}

int mt_tokenizer_reconstruct(const mt_tokenizer* t, const float* pixels, float* out_pixels) {
  return guarded([&] {
    need(t, "tokenizer");
    need(pixels, "pixels");
    need(out_pixels, "out_pixels");
    nn::NoGradGuard g;
    copy_out(t->model->reconstruct(image_from(t->model->config(), pixels)), out_pixels);
  });
}

int mt_tokenizer_counters(const mt_tokenizer* t, mt_counters* out) {
  return guarded([&] {
    need(t, "tokenizer");
    need(out, "out");
    const auto c = t->model->counts();
    *out = mt_counters{c.encode, c.decode, c.expand + c.expand_step};
  });
}

int mt_reconstruct_file(const mt_tokenizer* t, const char* in_path, const char* out_path, char** metrics) {
  return guarded([&] {
    need(t, "tokenizer");
    need(in_path, "in_path");
    need(out_path, "out_path");
    const auto image = io::read_image(in_path);
    const auto& c = t->model->config();
    if (image.dim(0) != c.resolution || image.dim(1) != c.resolution) {
      throw ValidationError(std::string("image '") + in_path + "' is " + nn::shape_str(image.shape()) +
                            ", tokenizer expects " + std::to_string(c.resolution) + "x" + std::to_string(c.resolution));
    }
    nn::NoGradGuard g;
    const auto out = t->model->reconstruct(image);
    write_image(out_path, out);
    if (metrics) put_string(metrics, metrics_json(io::psnr(out, image), io::ssim(out, image)).dump());
  });
}

int mt_image_metrics(const char* a_path, const char* b_path, double* psnr, double* ssim) {
  return guarded([&] {
    need(a_path, "a_path");
    need(b_path, "b_path");
    const auto a = io::read_image(a_path), b = io::read_image(b_path);
    if (psnr) *psnr = io::psnr(a, b);
    if (ssim) *ssim = io::ssim(a, b);
  });
}

int mt_train_tokenizer(const char* config_json, const char* base_dir, const char* checkpoint_out,
                       const char* metrics_path) {
  return guarded([&] {
    need(config_json, "config_json");
    need(checkpoint_out, "checkpoint_out");
    const auto config =
        mim::TrainConfig::from_json(parse_json(config_json, "training config"), base_dir ? base_dir : "");
    std::ofstream metrics;
    if (metrics_path) metrics = open_out(metrics_path);
    auto model = mim::train_tokenizer<float>(config, metrics_path ? &metrics : nullptr);
    model->save(checkpoint_out);
  });
}

int mt_train_unified(const char* config_json, const char* base_dir, const char* checkpoint_out,
                     const char* metrics_path) {
  return guarded([&] {
    need(config_json, "config_json");
    need(checkpoint_out, "checkpoint_out");
    const auto config =
        ar::UnifiedTrainConfig::from_json(parse_json(config_json, "unified training config"), base_dir ? base_dir : "");
    const auto tokenizer = tok::MingTok<float>::load(config.tokenizer);
    std::ofstream metrics;
    if (metrics_path) metrics = open_out(metrics_path);
    auto model = ar::train_unified(config, *tokenizer, metrics_path ? &metrics : nullptr);
    model->save(checkpoint_out, std::filesystem::absolute(config.tokenizer));
  });
}

int mt_unified_load(const char* path, mt_unified** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto loaded = ar::UnifiedModel<float>::load(path);
    auto tokenizer = tok::MingTok<float>::load(loaded.tokenizer_checkpoint);
    const auto& tc = tokenizer->config();
    if (loaded.model->config().latent_dim != tc.latent_dim ||
        loaded.model->config().semantic_dim != tc.semantic_dim()) {
      throw ValidationError("unified checkpoint does not match tokenizer '" + loaded.tokenizer_checkpoint.string() + "'");
    }
    *out = new mt_unified{std::move(tokenizer), std::move(loaded.model)};
  });
}

void mt_unified_free(mt_unified* model) { delete model; }

int mt_generate(const mt_unified* u, const char* prompt, size_t steps, uint64_t seed, const char* out_path,
                char** info_json) {
  return guarded([&] {
    need(u, "model");
    need(prompt, "prompt");
    need(out_path, "out_path");
    if (steps == 0) steps = u->model->config().flow.steps;
    ar::Sequence<float> prefix{ar::SequenceItem<float>::text(ar::vocab::kBOS)};
    for (std::size_t id : ar::vocab::encode_bytes(prompt)) prefix.push_back(ar::SequenceItem<float>::text(id));
    prefix.push_back(ar::SequenceItem<float>::text(ar::vocab::kBOI));
    nn::Rng rng(seed);
    nn::NoGradGuard g;
    const auto gen = ar::generate_image(*u->model, *u->tokenizer, prefix, steps, rng);
    const auto pixels = u->tokenizer->decode_pixels(gen.semantics);
    write_image(out_path, pixels);
    put_string(info_json, json{{"tokens", gen.latents.count()},
                               {"steps", steps},
                               {"seed", seed},
                               {"latent_checksum", session::checksum(gen.latents.tokens)},
                               {"pixel_checksum", session::checksum(pixels)}}
                              .dump());
  });
}

int mt_session_create(const mt_unified* model, mt_session** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = new mt_session(model);
  });
}

void mt_session_free(mt_session* s) { delete s; }

int mt_session_add_text(mt_session* s, const char* text) {
  return guarded([&] {
    need(s, "session");
    need(text, "text");
    s->state.add_text(text);
  });
}

int mt_session_add_image(mt_session* s, const float* pixels, size_t* image_index) {
  return guarded([&] {
    need(s, "session");
    need(pixels, "pixels");
    const std::size_t idx = s->state.add_image(image_from(s->state.tokenizer().config(), pixels));
    if (image_index) *image_index = idx;
  });
}

int mt_session_generate(mt_session* s, const char* instruction, size_t steps, uint64_t seed, size_t* image_index) {
  return guarded([&] {
    need(s, "session");
    need(instruction, "instruction");
    const std::size_t idx = s->state.generate(instruction, steps, seed);
    if (image_index) *image_index = idx;
  });
}

int mt_session_render(mt_session* s, size_t image_index, float* pixels) {
  return guarded([&] {
    need(s, "session");
    need(pixels, "pixels");
    copy_out(s->state.render(image_index), pixels);
  });
}

int mt_session_counters(const mt_session* s, mt_counters* out) {
  return guarded([&] {
    need(s, "session");
    need(out, "out");
    *out = to_c(s->state.counters());
  });
}

int mt_session_context_length(const mt_session* s, size_t* out) {
  return guarded([&] {
    need(s, "session");
    need(out, "out");
    *out = s->state.context_length();
  });
}

int mt_session_run_script(const mt_unified* model, const char* script_path, const char* out_dir,
                          const char* transcript_path) {
  return guarded([&] {
    need(model, "model");
    need(script_path, "script_path");
    need(out_dir, "out_dir");
    need(transcript_path, "transcript_path");
    std::ifstream script(script_path);
    if (!script) throw IoError(std::string("cannot open '") + script_path + "'");
    std::ofstream transcript = open_out(transcript_path);
    session::Session<float> s(*model->tokenizer, model->model.get());
    session::run_script(s, script, std::filesystem::path(script_path).parent_path(), out_dir, transcript);
  });
}

int mt_gradcheck(int include_f32, char** report_json) {
  bool failed = false;
  const int rc = guarded([&] {
    const auto results = mim::run_grad_suite(include_f32 != 0);
    json cases = json::array();
    std::string failing;
    for (const auto& r : results) {
      cases.push_back(mim::to_json(r));
      if (!r.passed) {
        failed = true;
        failing += (failing.empty() ? "" : ", ") + r.name + " (" + r.precision + ")";
      }
    }
    put_string(report_json, json{{"passed", !failed}, {"cases", cases}}.dump());
    if (failed) g_error = "gradient check failed: " + failing;
  });
  if (rc != MT_OK) return rc;
  return failed ? MT_ERR_CHECK : MT_OK;
}

int mt_debug_set_backward_fault(const char* op) {
  return guarded([&] { nn::set_backward_fault(op ? op : ""); });
}

}  // extern "C"
