#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mingtok/mingtok.h"

using json = nlohmann::json;

namespace {

enum class Level { Error = 0, Info = 1, Debug = 2 };

Level log_level() {
  const char* v = std::getenv("MINGTOK_LOG_LEVEL");
  if (!v) return Level::Info;
  const std::string s(v);
  if (s == "error" || s == "quiet") return Level::Error;
  if (s == "debug") return Level::Debug;
  return Level::Info;
}

void log(Level level, const std::string& msg) {
  if (level <= log_level()) std::cerr << msg << '\n';
}

// Prints the last C API error and returns the status as exit code.
int fail(int status, const std::string& what) {
  log(Level::Error, "error: " + what + ": " + mt_last_error());
  return status;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  mt_string_free(s);
  return out;
}

bool read_file(const std::string& path, std::string& out) {
  std::ifstream is(path);
  if (!is) return false;
  std::ostringstream ss;
  ss << is.rdbuf();
  out = ss.str();
  return true;
}

// Config text with "seed" replaced when --seed was given.
int load_config(const std::string& path, bool seed_given, std::uint64_t seed, std::string& text) {
  if (!read_file(path, text)) {
    log(Level::Error, "error: cannot open config '" + path + "'");
    return MT_ERR_VALIDATION;
  }
  if (!seed_given) return MT_OK;
  try {
    json j = json::parse(text);
    j["seed"] = seed;
    text = j.dump();
  } catch (const json::exception& e) {
    log(Level::Error, "error: config '" + path + "': " + e.what());
    return MT_ERR_VALIDATION;
  }
  return MT_OK;
}

std::string fmt_pct(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * r);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MingTok tokenizer and unified generation toolkit"};
  app.require_subcommand(1);
  bool as_json = false;
  std::uint64_t seed = 0;
  app.add_flag("--json", as_json, "Single-line JSON output");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides config seeds)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  std::string fault;
  bool f64_only = false;
  gc->add_option("--inject-fault", fault, "Negate the backward rule of this op (mutation test)");
  gc->add_flag("--f64-only", f64_only, "Skip the 32-bit pass");

  // train-tokenizer
  auto* tt = app.add_subcommand("train-tokenizer", "Masked-image-modeling training of the tokenizer");
  std::string tt_config, tt_out, tt_metrics;
  tt->add_option("--config", tt_config, "Training config JSON")->required();
  tt->add_option("--out", tt_out, "Checkpoint path (.mtok; a .json sidecar is written beside it)")->required();
  tt->add_option("--metrics", tt_metrics, "Metrics JSON-lines output");

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "Encode, expand and decode one image");
  std::string rc_ckpt, rc_in, rc_out;
  rc->add_option("--ckpt", rc_ckpt, "Tokenizer checkpoint")->required();
  rc->add_option("--in", rc_in, "Input image (.png or .mtok)")->required();
  rc->add_option("--out", rc_out, "Output image (.png or .mtok)")->required();

  // train-unified
  auto* tu = app.add_subcommand("train-unified", "Joint text/latent training of the sequence model");
  std::string tu_config, tu_out, tu_metrics;
  tu->add_option("--config", tu_config, "Unified training config JSON")->required();
  tu->add_option("--out", tu_out, "Checkpoint path")->required();
  tu->add_option("--metrics", tu_metrics, "Metrics JSON-lines output");

  // generate
  auto* gen = app.add_subcommand("generate", "Generate an image from a text prompt");
  std::string gen_ckpt, gen_prompt, gen_out;
  std::size_t gen_k = 0;
  gen->add_option("--ckpt", gen_ckpt, "Unified checkpoint")->required();
  gen->add_option("--prompt", gen_prompt, "Prompt text")->required();
  gen->add_option("--K", gen_k, "Euler steps (0 = checkpoint default)");
  gen->add_option("--out", gen_out, "Output image (.png or .mtok)")->required();

  // session
  auto* ses = app.add_subcommand("session", "Run a multi-round session script");
  std::string ses_ckpt, ses_script, ses_dir, ses_transcript;
  ses->add_option("--ckpt", ses_ckpt, "Unified checkpoint")->required();
  ses->add_option("--script", ses_script, "Session script (JSON lines)")->required();
  ses->add_option("--out-dir", ses_dir, "Directory for rendered images and the transcript")->required();
  ses->add_option("--transcript", ses_transcript, "Transcript path (default <out-dir>/transcript.jsonl)");

  // budget
  auto* bud = app.add_subcommand("budget", "Visual token budget per architecture");
  std::string bud_arch = "unified";
  std::size_t bud_images = 1, bud_tokens = 256;
  bud->add_option("--arch", bud_arch, "unified | separate | hybrid")
      ->check(CLI::IsMember({"unified", "separate", "hybrid"}));
  bud->add_option("--images", bud_images, "Number of images");
  bud->add_option("--tokens", bud_tokens, "Tokens per image");

  // inspect
  auto* ins = app.add_subcommand("inspect", "Resolved preset: token and parameter counts");
  std::string ins_preset = "paper";
  ins->add_option("--preset", ins_preset, "paper | tiny | micro");

  // metrics
  auto* met = app.add_subcommand("metrics", "PSNR and SSIM between two images");
  std::string met_a, met_b;
  met->add_option("a", met_a, "First image")->required();
  met->add_option("b", met_b, "Second image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : MT_ERR_VALIDATION;
  }
  const bool seed_given = seed_opt->count() > 0;

  if (gc->parsed()) {
    if (!fault.empty()) {
      mt_debug_set_backward_fault(fault.c_str());
      log(Level::Info, "injected sign flip into backward of '" + fault + "'");
    }
    char* report = nullptr;
    const int st = mt_gradcheck(f64_only ? 0 : 1, &report);
    if (st != MT_OK && st != MT_ERR_CHECK) return fail(st, "gradcheck");
    const json r = json::parse(take(report));
    if (as_json) {
      std::cout << r.dump() << '\n';
    } else {
      for (const auto& c : r["cases"]) {
        char line[256];
        std::snprintf(line, sizeof line, "%-4s %-26s %-4s max_rel_err=%.3e tol=%.0e", c["passed"].get<bool>() ? "ok" : "FAIL",
                      c["case"].get<std::string>().c_str(), c["precision"].get<std::string>().c_str(),
                      c["max_rel_error"].get<double>(), c["tolerance"].get<double>());
        std::cout << line << '\n';
      }
    }
    if (st == MT_ERR_CHECK) return fail(st, "gradcheck");
    return MT_OK;
  }

  if (tt->parsed()) {
    std::string text;
    if (int st = load_config(tt_config, seed_given, seed, text)) return st;
    const std::string base = std::filesystem::path(tt_config).parent_path().string();
    log(Level::Info, "training tokenizer from " + tt_config);
    const int st = mt_train_tokenizer(text.c_str(), base.c_str(), tt_out.c_str(),
                                      tt_metrics.empty() ? nullptr : tt_metrics.c_str());
    if (st) return fail(st, "train-tokenizer");
    if (as_json) std::cout << json{{"checkpoint", tt_out}}.dump() << '\n';
    else std::cout << "wrote " << tt_out << '\n';
    return MT_OK;
  }

  if (rc->parsed()) {
    mt_tokenizer* tok = nullptr;
    if (int st = mt_tokenizer_load(rc_ckpt.c_str(), &tok)) return fail(st, "reconstruct");
    char* metrics = nullptr;
    const int st = mt_reconstruct_file(tok, rc_in.c_str(), rc_out.c_str(), &metrics);
    mt_tokenizer_free(tok);
    if (st) return fail(st, "reconstruct");
    json m = json::parse(take(metrics));
    m["out"] = rc_out;
    if (as_json) {
      std::cout << m.dump() << '\n';
    } else {
      std::cout << "wrote " << rc_out << "\npsnr " << (m["psnr"].is_string() ? std::string("inf") : std::to_string(m["psnr"].get<double>()))
                << " dB\nssim " << m["ssim"].get<double>() << '\n';
    }
    return MT_OK;
  }

  if (tu->parsed()) {
    std::string text;
    if (int st = load_config(tu_config, seed_given, seed, text)) return st;
    const std::string base = std::filesystem::path(tu_config).parent_path().string();
    log(Level::Info, "training unified model from " + tu_config);
    const int st = mt_train_unified(text.c_str(), base.c_str(), tu_out.c_str(),
                                    tu_metrics.empty() ? nullptr : tu_metrics.c_str());
    if (st) return fail(st, "train-unified");
    if (as_json) std::cout << json{{"checkpoint", tu_out}}.dump() << '\n';
    else std::cout << "wrote " << tu_out << '\n';
    return MT_OK;
  }

  if (gen->parsed()) {
    mt_unified* model = nullptr;
    if (int st = mt_unified_load(gen_ckpt.c_str(), &model)) return fail(st, "generate");
    char* info = nullptr;
    const int st = mt_generate(model, gen_prompt.c_str(), gen_k, seed, gen_out.c_str(), &info);
    mt_unified_free(model);
    if (st) return fail(st, "generate");
    json j = json::parse(take(info));
    j["out"] = gen_out;
    if (as_json) std::cout << j.dump() << '\n';
    else std::cout << "wrote " << gen_out << " (" << j["tokens"] << " latents, K=" << j["steps"] << ")\n";
    return MT_OK;
  }

  if (ses->parsed()) {
    mt_unified* model = nullptr;
    if (int st = mt_unified_load(ses_ckpt.c_str(), &model)) return fail(st, "session");
    std::filesystem::create_directories(ses_dir);
    if (ses_transcript.empty()) ses_transcript = (std::filesystem::path(ses_dir) / "transcript.jsonl").string();
    const int st = mt_session_run_script(model, ses_script.c_str(), ses_dir.c_str(), ses_transcript.c_str());
    mt_unified_free(model);
    if (st) return fail(st, "session");
    std::string transcript;
    read_file(ses_transcript, transcript);
    json summary;
    std::istringstream lines(transcript);
    for (std::string line; std::getline(lines, line);) {
      if (!line.empty()) summary = json::parse(line);
    }
    if (as_json) {
      std::cout << json{{"transcript", ses_transcript}, {"summary", summary}}.dump() << '\n';
    } else {
      std::cout << "transcript " << ses_transcript << '\n' << "images " << summary["images"] << ", context "
                << summary["context_length"] << ", counters " << summary["counters"].dump() << '\n';
    }
    return MT_OK;
  }

  if (bud->parsed()) {
    const int kinds[3] = {MT_ARCH_UNIFIED, MT_ARCH_SEPARATE, MT_ARCH_HYBRID};
    const char* names[3] = {"unified", "separate", "hybrid"};
    int chosen = MT_ARCH_UNIFIED;
    for (int i = 0; i < 3; ++i) {
      if (bud_arch == names[i]) chosen = kinds[i];
    }
    std::size_t count = 0;
    if (int st = mt_visual_token_count(chosen, bud_images, bud_tokens, &count)) return fail(st, "budget");
    json table = json::array();
    for (int i = 0; i < 3; ++i) {
      std::size_t c = 0;
      mt_visual_token_count(kinds[i], bud_images, bud_tokens, &c);
      json row{{"arch", names[i]}, {"visual_tokens", c}};
      double red = 0;
      if (bud_images > 0 && bud_tokens > 0 && mt_token_reduction(MT_ARCH_UNIFIED, kinds[i], bud_images, bud_tokens, &red) == MT_OK) {
        row["unified_reduction"] = red;
      }
      table.push_back(row);
    }
    if (as_json) {
      std::cout << json{{"arch", bud_arch}, {"images", bud_images}, {"tokens_per_image", bud_tokens},
                        {"visual_tokens", count}, {"table", table}}
                       .dump()
                << '\n';
    } else {
      std::cout << bud_arch << ": " << count << " visual tokens (" << bud_images << " images x " << bud_tokens
                << " tokens)\n\n";
      std::cout << "arch       tokens    unified saves\n";
      for (const auto& row : table) {
        char line[128];
        std::snprintf(line, sizeof line, "%-10s %-9zu %s", row["arch"].get<std::string>().c_str(),
                      row["visual_tokens"].get<std::size_t>(),
                      row.contains("unified_reduction") ? fmt_pct(row["unified_reduction"].get<double>()).c_str() : "-");
        std::cout << line << '\n';
      }
    }
    return MT_OK;
  }

  if (ins->parsed()) {
    char* out = nullptr;
    if (int st = mt_inspect_preset(ins_preset.c_str(), &out)) return fail(st, "inspect");
    const json j = json::parse(take(out));
    if (as_json) {
      std::cout << j.dump() << '\n';
    } else {
      const auto& c = j["config"];
      std::cout << "preset        " << c["preset"].get<std::string>() << '\n'
                << "resolution    " << c["resolution"] << '\n'
                << "patch         " << c["base_patch"] << " (pixel decoder " << c["pixel_patch"] << ")\n"
                << "tokens        " << j["tokens"] << " (" << j["grid"] << "x" << j["grid"] << ")\n"
                << "latent_dim    " << j["latent_dim"] << '\n'
                << "pixel tokens  " << j["pixel_tokens"] << '\n';
      for (const char* s : {"low", "sem", "pix"}) {
        const auto& b = c[s];
        std::cout << s << "           depth " << b["depth"]
                  << ", width " << b["embed_dim"] << ", heads " << b["num_heads"] << ", " << b["attention"].get<std::string>()
                  << '\n';
      }
      std::cout << "parameters    " << j["parameters"]["total"] << '\n';
    }
    return MT_OK;
  }

  if (met->parsed()) {
    double psnr = 0, ssim = 0;
    if (int st = mt_image_metrics(met_a.c_str(), met_b.c_str(), &psnr, &ssim)) return fail(st, "metrics");
    json j{{"psnr", std::isinf(psnr) ? json("inf") : json(psnr)}, {"ssim", ssim}};
    if (as_json) std::cout << j.dump() << '\n';
    else std::cout << "psnr " << (std::isinf(psnr) ? std::string("inf") : std::to_string(psnr)) << " dB\nssim " << ssim << '\n';
    return MT_OK;
  }
  return MT_OK;
}
