#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "unified/backbone.hpp"

namespace mingtok::session {

using nn::Tensor;

// Image representations fed to a sequence model per image.
enum class ArchitectureKind { UnifiedMingTok = 1, UnifiedARSeparate = 2, HybridARDiffusion = 3 };

std::size_t representations_per_image(ArchitectureKind kind);
const char* to_string(ArchitectureKind kind);
// "unified", "separate", "hybrid"
ArchitectureKind architecture_from(const std::string& name);
std::size_t visual_token_count(ArchitectureKind kind, std::size_t images, std::size_t tokens_per_image);
// 1 - count(kind) / count(baseline); requires images, tokens_per_image > 0.
double token_reduction(ArchitectureKind kind, ArchitectureKind baseline, std::size_t images,
                       std::size_t tokens_per_image);

struct Counters {
  std::uint64_t encode = 0;
  std::uint64_t decode = 0;
  std::uint64_t expand = 0;
};

template <typename T>
struct ImageSpan {
  std::size_t first_item = 0;  // index of the first visual item
  std::string origin;          // "input" or "generated"
  tok::LatentSeq<T> latents;
  tok::SemanticSeq<T> semantics;
};

// Persistent multi-round context over a shared frozen tokenizer and model.
// Every image occupies BOI, T visual items and EOI; visual items carry the
// cached semantic expansion so later rounds never touch pixels.
template <typename T>
class Session {
 public:
  // model may be null for sessions that only add and render images.
  Session(const tok::MingTok<T>& tokenizer, const ar::UnifiedModel<T>* model);

  void add_text(const std::string& text);
  void add_tokens(const std::vector<std::size_t>& ids);
  // One encode and one expand. Returns the image index.
  std::size_t add_image(const Tensor<T>& image);
  // Appends instruction bytes and BOI, generates T latents over the whole
  // context, appends EOI. steps == 0 uses the flow head default.
  std::size_t generate(const std::string& instruction, std::size_t steps, std::uint64_t seed,
                       ar::GenerationMode mode = ar::GenerationMode::Incremental);
  // Decodes cached semantics to pixels. Does not modify the context.
  Tensor<T> render(std::size_t index);

  const tok::MingTok<T>& tokenizer() const { return tokenizer_; }
  const ar::Sequence<T>& items() const { return items_; }
  const std::vector<ImageSpan<T>>& images() const { return images_; }
  const Counters& counters() const { return counters_; }
  std::size_t context_length() const { return items_.size(); }
  std::size_t text_length() const;
  std::size_t visual_length() const;

  // JSON lines, one record per text run or image; image latents and semantics
  // go to <dir>/image_<i>.mtok.
  void save(const std::filesystem::path& jsonl, const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& jsonl);

 private:
  void append_image(tok::LatentSeq<T> latents, tok::SemanticSeq<T> semantics, const std::string& origin);

  const tok::MingTok<T>& tokenizer_;
  const ar::UnifiedModel<T>* model_;
  ar::Sequence<T> items_;
  std::vector<ImageSpan<T>> images_;
  Counters counters_;
};

// FNV-1a over the float bytes of a tensor, as 16 hex digits.
template <typename T>
std::string checksum(const Tensor<T>& t);

// Runs a JSON-lines session script. Ops:
//   {"op":"add_text","text":s}
//   {"op":"add_image","path":p} | {"op":"add_image","synthetic":seed}
//   {"op":"generate","text":s,"K":k,"seed":n}
//   {"op":"render","image":i,"out":name}
// Relative paths resolve against base_dir; rendered images land in out_dir as
// <name>.png and <name>.mtok. One transcript record per op is written to
// transcript, followed by a summary record.
void run_script(Session<float>& session, std::istream& script, const std::filesystem::path& base_dir,
                const std::filesystem::path& out_dir, std::ostream& transcript);

}  // namespace mingtok::session
