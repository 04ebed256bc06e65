#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "vit/blocks.hpp"

namespace mingtok::tok {

using nn::ParamList;
using nn::Rng;
using nn::Tensor;
using vit::BlockConfig;

// Architecture of the three-stage tokenizer.
//   low: full-attention encoder over base_patch patches
//   sem: causal semantic decoder, same token grid
//   pix: full-attention pixel decoder over the grid shuffled by
//        base_patch / pixel_patch
struct MingTokConfig {
  std::string preset = "custom";
  std::size_t resolution = 0;
  std::size_t base_patch = 0;
  std::size_t pixel_patch = 0;
  std::size_t latent_dim = 0;
  BlockConfig low;
  BlockConfig sem;
  BlockConfig pix;

  std::size_t semantic_dim() const { return sem.embed_dim; }
  std::size_t grid() const { return resolution / base_patch; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t shuffle_factor() const { return base_patch / pixel_patch; }
  std::size_t pixel_grid() const { return grid() * shuffle_factor(); }
  std::size_t pixel_tokens() const { return pixel_grid() * pixel_grid(); }
  // Channels per pixel-decoder token right after the grid shuffle.
  std::size_t shuffled_dim() const { return semantic_dim() / (shuffle_factor() * shuffle_factor()); }

  void validate() const;
  // Inference parameters (no training heads).
  std::size_t parameter_count() const;

  nlohmann::json to_json() const;
  // Rejects unknown and missing keys.
  static MingTokConfig from_json(const nlohmann::json& j);
  // "paper", "tiny" or "micro".
  static MingTokConfig preset_named(const std::string& name);
};

std::vector<std::string> preset_names();

// Boolean mask over the token grid, raster order.
struct MaskPlan {
  std::size_t total = 0;
  std::vector<bool> masked;
  double ratio = 0.0;

  std::size_t masked_count() const;
  std::vector<std::size_t> masked_positions() const;
  bool empty() const { return masked_count() == 0; }
};

template <typename T>
struct LatentSeq {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<T> tokens;  // [rows * cols, latent_dim]
  std::size_t count() const { return rows * cols; }
};

template <typename T>
struct SemanticSeq {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<T> tokens;  // [rows * cols, semantic_dim]
  std::size_t count() const { return rows * cols; }
};

// Incremental semantic decoding state; one owner at a time.
template <typename T>
struct DecoderState {
  typename vit::BlockStack<T>::Cache cache;
  std::size_t position = 0;
  std::size_t total = 0;
};

// Parameter-free halves of the bottleneck shortcuts.
// Mean over d contiguous channel groups of size D/d: [T,D] -> [T,d].
template <typename T>
Tensor<T> channel_average(const Tensor<T>& x, std::size_t d);
// Each channel repeated D/d times contiguously: [T,d] -> [T,D].
template <typename T>
Tensor<T> channel_repeat(const Tensor<T>& x, std::size_t D);

// channel_average(x) + linear(x)
template <typename T>
class ChannelAverageShortcut {
 public:
  ChannelAverageShortcut() = default;
  ChannelAverageShortcut(std::size_t in, std::size_t out, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const { proj.collect(out, prefix); }
  vit::Linear<T> proj;
};

// channel_repeat(x) + linear(x)
template <typename T>
class ChannelRepeatShortcut {
 public:
  ChannelRepeatShortcut() = default;
  ChannelRepeatShortcut(std::size_t in, std::size_t out, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const { proj.collect(out, prefix); }
  vit::Linear<T> proj;
};

struct CallCounts {
  std::uint64_t encode = 0;
  std::uint64_t expand = 0;
  std::uint64_t expand_step = 0;
  std::uint64_t decode = 0;
};

template <typename T>
class MingTok {
 public:
  MingTok(const MingTokConfig& config, std::uint64_t seed);
  MingTok(const MingTok&) = delete;
  MingTok& operator=(const MingTok&) = delete;

  const MingTokConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // Image [R,R,3] in [0,1] -> compact latents [T, latent_dim]. Masked
  // positions have their patch projection replaced by the mask embedding.
  LatentSeq<T> encode(const Tensor<T>& image, const MaskPlan* mask = nullptr) const;
  // Latents -> semantic features through the causal decoder.
  SemanticSeq<T> expand(const LatentSeq<T>& latents) const;
  // Causal expansion of the first n latents [n, latent_dim] (n <= T).
  Tensor<T> expand_prefix(const Tensor<T>& latents) const;
  DecoderState<T> begin_expand() const;
  // One latent [latent_dim] (or [1, latent_dim]) -> its semantic token [semantic_dim].
  Tensor<T> expand_step(DecoderState<T>& state, const Tensor<T>& latent) const;
  Tensor<T> decode_pixels(const SemanticSeq<T>& semantics) const;
  Tensor<T> reconstruct(const Tensor<T>& image) const;

  // Namespaced: low.*, sem.*, pix.*, shortcut.*
  ParamList<T> parameters() const;

  CallCounts counts() const;
  void reset_counts();

  // Writes the tensor container at path and the JSON config beside it
  // (same stem, .json extension).
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<MingTok> load(const std::filesystem::path& path);

 private:
  void check_image(const Tensor<T>& image) const;
  void check_latents(const Tensor<T>& latents, std::size_t max_rows) const;

  MingTokConfig config_;
  std::uint64_t seed_;

  vit::PatchEmbed<T> low_patch_;
  Tensor<T> mask_token_;
  vit::BlockStack<T> low_blocks_;
  ChannelAverageShortcut<T> to_latent_;

  ChannelRepeatShortcut<T> from_latent_;
  vit::PosEmbed2D<T> sem_pos_;
  vit::BlockStack<T> sem_blocks_;

  vit::Linear<T> pix_in_;
  vit::PosEmbed2D<T> pix_pos_;
  vit::BlockStack<T> pix_blocks_;
  vit::Linear<T> pix_head_;

  mutable std::atomic<std::uint64_t> encode_calls_{0};
  mutable std::atomic<std::uint64_t> expand_calls_{0};
  mutable std::atomic<std::uint64_t> expand_step_calls_{0};
  mutable std::atomic<std::uint64_t> decode_calls_{0};
};

// JSON sidecar path for a checkpoint container.
std::filesystem::path sidecar_path(const std::filesystem::path& container);

}  // namespace mingtok::tok
