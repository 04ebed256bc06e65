#include "session/session.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "io/images.hpp"
#include "numerics/container.hpp"

namespace mingtok::session {

using json = nlohmann::json;
using ar::SequenceItem;
namespace vocab = ar::vocab;

std::size_t representations_per_image(ArchitectureKind kind) { return static_cast<std::size_t>(kind); }

const char* to_string(ArchitectureKind kind) {
  switch (kind) {
    case ArchitectureKind::UnifiedMingTok: return "unified";
    case ArchitectureKind::UnifiedARSeparate: return "separate";
    case ArchitectureKind::HybridARDiffusion: return "hybrid";
  }
  return "?";
}

ArchitectureKind architecture_from(const std::string& name) {
  if (name == "unified") return ArchitectureKind::UnifiedMingTok;
  if (name == "separate") return ArchitectureKind::UnifiedARSeparate;
  if (name == "hybrid") return ArchitectureKind::HybridARDiffusion;
  throw ValidationError("unknown architecture '" + name + "' (expected unified, separate or hybrid)");
}

std::size_t visual_token_count(ArchitectureKind kind, std::size_t images, std::size_t tokens_per_image) {
  return images * tokens_per_image * representations_per_image(kind);
}

double token_reduction(ArchitectureKind kind, ArchitectureKind baseline, std::size_t images,
                       std::size_t tokens_per_image) {
  if (images == 0 || tokens_per_image == 0) throw ValidationError("token_reduction: images and tokens must be > 0");
  return 1.0 - static_cast<double>(visual_token_count(kind, images, tokens_per_image)) /
                   static_cast<double>(visual_token_count(baseline, images, tokens_per_image));
}

template <typename T>
Session<T>::Session(const tok::MingTok<T>& tokenizer, const ar::UnifiedModel<T>* model)
    : tokenizer_(tokenizer), model_(model) {
  if (model) {
    const auto& tc = tokenizer.config();
    if (model->config().latent_dim != tc.latent_dim || model->config().semantic_dim != tc.semantic_dim()) {
      throw ValidationError("session: model and tokenizer widths disagree");
    }
  }
}

template <typename T>
void Session<T>::add_text(const std::string& text) {
  add_tokens(vocab::encode_bytes(text));
}

template <typename T>
void Session<T>::add_tokens(const std::vector<std::size_t>& ids) {
  for (std::size_t id : ids) items_.push_back(SequenceItem<T>::text(id));
}

template <typename T>
void Session<T>::append_image(tok::LatentSeq<T> latents, tok::SemanticSeq<T> semantics, const std::string& origin) {
  nn::NoGradGuard guard;
  const std::size_t n = latents.count();
  const std::size_t ld = latents.tokens.dim(1), sd = semantics.tokens.dim(1);
  items_.push_back(SequenceItem<T>::text(vocab::kBOI));
  ImageSpan<T> span;
  span.first_item = items_.size();
  span.origin = origin;
  for (std::size_t i = 0; i < n; ++i) {
    items_.push_back(SequenceItem<T>::visual(nn::reshape(nn::slice(latents.tokens, 0, i, i + 1), {ld}),
                                             nn::reshape(nn::slice(semantics.tokens, 0, i, i + 1), {sd})));
  }
  items_.push_back(SequenceItem<T>::text(vocab::kEOI));
  span.latents = std::move(latents);
  span.semantics = std::move(semantics);
  images_.push_back(std::move(span));
}

template <typename T>
std::size_t Session<T>::add_image(const Tensor<T>& image) {
  nn::NoGradGuard guard;
  auto latents = tokenizer_.encode(image);
  ++counters_.encode;
  auto semantics = tokenizer_.expand(latents);
  ++counters_.expand;
  append_image(std::move(latents), std::move(semantics), "input");
  return images_.size() - 1;
}

template <typename T>
std::size_t Session<T>::generate(const std::string& instruction, std::size_t steps, std::uint64_t seed,
                                 ar::GenerationMode mode) {
  if (!model_) throw ValidationError("session: generate needs a unified model");
  if (steps == 0) steps = model_->config().flow.steps;
  // Validate against the context window before mutating anything.
  const std::size_t needed = items_.size() + instruction.size() + 1 + tokenizer_.config().tokens() + 1;
  if (needed > model_->config().max_context) {
    throw ValidationError("context overflow: round needs " + std::to_string(needed) + " positions, max_context is " +
                          std::to_string(model_->config().max_context) +
                          "; truncate earlier rounds or raise max_context");
  }
  add_text(instruction);
  items_.push_back(SequenceItem<T>::text(vocab::kBOI));
  nn::Rng rng(seed);
  auto generated = ar::generate_image(*model_, tokenizer_, items_, steps, rng, mode);
  items_.pop_back();
  ++counters_.expand;
  append_image(std::move(generated.latents), std::move(generated.semantics), "generated");
  return images_.size() - 1;
}

template <typename T>
Tensor<T> Session<T>::render(std::size_t index) {
  if (index >= images_.size()) {
    throw ValidationError("render: image index " + std::to_string(index) + " out of range (" +
                          std::to_string(images_.size()) + " images)");
  }
  nn::NoGradGuard guard;
  Tensor<T> out = tokenizer_.decode_pixels(images_[index].semantics);
  ++counters_.decode;
  return out;
}

template <typename T>
std::size_t Session<T>::text_length() const {
  std::size_t n = 0;
  for (const auto& it : items_) n += it.is_text() ? 1 : 0;
  return n;
}

template <typename T>
std::size_t Session<T>::visual_length() const {
  return items_.size() - text_length();
}

template <typename T>
void Session<T>::save(const std::filesystem::path& jsonl, const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream os(jsonl);
  if (!os) throw IoError("cannot write '" + jsonl.string() + "'");
  std::vector<std::size_t> run;
  auto flush = [&] {
    if (run.empty()) return;
    os << json{{"type", "text"}, {"bytes", run}}.dump() << '\n';
    run.clear();
  };
  std::size_t next_image = 0;
  for (std::size_t i = 0; i < items_.size();) {
    if (items_[i].is_text()) {
      run.push_back(items_[i].token);
      ++i;
      continue;
    }
    flush();
    const auto& span = images_.at(next_image);
    const std::string name = "image_" + std::to_string(next_image) + ".mtok";
    nn::write_container(dir / name, {nn::to_array("latents", span.latents.tokens),
                                     nn::to_array("semantics", span.semantics.tokens)});
    const auto rel = std::filesystem::relative(dir / name, jsonl.parent_path().empty() ? "." : jsonl.parent_path());
    os << json{{"type", "image"}, {"latent_file", rel.string()}, {"origin", span.origin}}.dump() << '\n';
    i += span.latents.count();
    ++next_image;
  }
  flush();
}

template <typename T>
void Session<T>::load(const std::filesystem::path& jsonl) {
  std::ifstream is(jsonl);
  if (!is) throw IoError("cannot open '" + jsonl.string() + "'");
  const auto& tc = tokenizer_.config();
  items_.clear();
  images_.clear();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = jsonl.string() + ":" + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    const std::string type = rec.value("type", "");
    if (type == "text") {
      add_tokens(rec.at("bytes").get<std::vector<std::size_t>>());
    } else if (type == "image") {
      std::filesystem::path file = rec.at("latent_file").get<std::string>();
      if (file.is_relative()) file = jsonl.parent_path() / file;
      const auto entries = nn::read_container(file);
      Tensor<T> lat = nn::from_array<T>(nn::find_entry(entries, "latents"));
      Tensor<T> sem = nn::from_array<T>(nn::find_entry(entries, "semantics"));
      if (lat.shape() != nn::Shape{tc.tokens(), tc.latent_dim} ||
          sem.shape() != nn::Shape{tc.tokens(), tc.semantic_dim()}) {
        throw ValidationError(where + ": image tensors do not match the tokenizer config");
      }
      if (items_.empty() || !items_.back().is_text() || items_.back().token != vocab::kBOI) {
        throw ValidationError(where + ": image record must follow BOI");
      }
      items_.pop_back();
      append_image({tc.grid(), tc.grid(), lat}, {tc.grid(), tc.grid(), sem}, rec.value("origin", "input"));
      // append_image framed the span; the stored EOI follows in the next text record.
      items_.pop_back();
    } else {
      throw ValidationError(where + ": unknown record type '" + type + "'");
    }
  }
}

template <typename T>
std::string checksum(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ull;
  for (T v : t.values()) {
    const float f = static_cast<float>(v);
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    for (unsigned char c : b) {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

template class Session<float>;
template class Session<double>;
template std::string checksum(const Tensor<float>&);
template std::string checksum(const Tensor<double>&);

namespace {

json counters_json(const Counters& c) {
  return json{{"encode_calls", c.encode}, {"decode_calls", c.decode}, {"expand_calls", c.expand}};
}

void check_keys(const json& rec, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = rec.begin(); it != rec.end(); ++it) {
    bool ok = it.key() == "op";
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ValidationError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace

void run_script(Session<float>& session, std::istream& script, const std::filesystem::path& base_dir,
                const std::filesystem::path& out_dir, std::ostream& transcript) {
  std::filesystem::create_directories(out_dir);
  std::string line;
  std::size_t lineno = 0, round = 0;
  while (std::getline(script, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "script line " + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("op")) throw ValidationError(where + ": missing \"op\"");
    const std::string op = rec.at("op").get<std::string>();
    json out{{"line", lineno}, {"op", op}};
    if (op == "add_text") {
      check_keys(rec, {"text"}, where);
      session.add_text(rec.at("text").get<std::string>());
    } else if (op == "add_image") {
      check_keys(rec, {"path", "synthetic"}, where);
      Tensor<float> image;
      if (rec.contains("synthetic")) {
        image = io::synthetic_image(session.tokenizer().config().resolution, rec.at("synthetic").get<std::uint64_t>());
      }
      if (rec.contains("path")) {
        std::filesystem::path p = rec.at("path").get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        image = io::read_image(p);
      } else if (!rec.contains("synthetic")) {
        throw ValidationError(where + ": add_image needs \"path\" or \"synthetic\"");
      }
      const std::size_t idx = session.add_image(image);
      out["image"] = idx;
      out["latent_checksum"] = checksum(session.images()[idx].latents.tokens);
    } else if (op == "generate") {
      check_keys(rec, {"text", "K", "seed"}, where);
      const std::size_t idx = session.generate(rec.value("text", std::string()), rec.value("K", std::size_t{0}),
                                               rec.value("seed", std::uint64_t{0}));
      out["round"] = ++round;
      out["image"] = idx;
      out["latent_checksum"] = checksum(session.images()[idx].latents.tokens);
    } else if (op == "render") {
      check_keys(rec, {"image", "out"}, where);
      const std::size_t idx = rec.at("image").get<std::size_t>();
      const Tensor<float> pixels = session.render(idx);
      const std::string name = rec.value("out", "render_" + std::to_string(idx));
      io::write_png(out_dir / (name + ".png"), pixels);
      io::write_image_tensor(out_dir / (name + ".mtok"), pixels);
      out["image"] = idx;
      out["file"] = name + ".png";
      out["pixel_checksum"] = checksum(pixels);
    } else {
      throw ValidationError(where + ": unknown op '" + op + "'");
    }
    out["context_length"] = session.context_length();
    out["counters"] = counters_json(session.counters());
    transcript << out.dump() << '\n';
  }
  json summary{{"summary", true},
               {"images", session.images().size()},
               {"context_length", session.context_length()},
               {"text_length", session.text_length()},
               {"visual_length", session.visual_length()},
               {"counters", counters_json(session.counters())}};
  json sums = json::array();
  for (const auto& span : session.images()) sums.push_back(checksum(span.latents.tokens));
  summary["latent_checksums"] = sums;
  transcript << summary.dump() << '\n';
}

}  // namespace mingtok::session
