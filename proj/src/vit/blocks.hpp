#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "numerics/container.hpp"
#include "numerics/rng.hpp"
#include "numerics/tensor.hpp"

namespace mingtok::vit {

using nn::ParamList;
using nn::Rng;
using nn::Shape;
using nn::Tensor;

enum class AttentionMode { Full, Causal };

const char* to_string(AttentionMode mode);
AttentionMode attention_mode_from(const std::string& name);

struct BlockConfig {
  std::size_t embed_dim = 0;
  std::size_t depth = 0;
  std::size_t num_heads = 1;
  std::size_t head_dim = 0;
  double ffn_hidden_factor = 8.0 / 3.0;
  AttentionMode attention = AttentionMode::Full;

  // SwiGLU hidden width: factor * embed_dim rounded up to a multiple of 8.
  std::size_t ffn_hidden() const;
  // Throws ValidationError prefixed with `what` when num_heads * head_dim != embed_dim.
  void validate(const std::string& what) const;
  // Trainable parameter count of a stack built from this config.
  std::size_t parameter_count() const;
};

// Tokens of a rows x cols grid in raster order.
template <typename T>
struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<T> tokens;  // [rows * cols, D]

  std::size_t count() const { return rows * cols; }
  std::size_t channels() const { return tokens.dim(1); }
};

template <typename T>
Tensor<T> normal_param(Rng& rng, Shape shape, double stddev);

// y = x W + b with W [in, out].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng, double init_std = 0.02);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> weight;
  Tensor<T> bias;  // undefined when built without bias
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  Tensor<T> scale;
  Tensor<T> shift;
};

// Cached keys/values for incremental causal decoding, [heads, length, head_dim].
template <typename T>
struct KvCache {
  Tensor<T> keys;
  Tensor<T> values;
  std::size_t length() const { return keys.defined() ? keys.dim(1) : 0; }
};

template <typename T>
class Attention {
 public:
  Attention() = default;
  Attention(std::size_t embed_dim, std::size_t num_heads, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, AttentionMode mode) const;
  // Appends x's rows after the cached positions; row i sees cached positions
  // and new rows 0..i. Updates the cache in place.
  Tensor<T> step(const Tensor<T>& x, KvCache<T>& cache) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  Linear<T> qkv;
  Linear<T> proj;

 private:
  std::size_t embed_dim_ = 0;
  std::size_t num_heads_ = 1;
};

// out = W_down (silu(W_gate x) * W_up x), no biases.
template <typename T>
class SwiGLU {
 public:
  SwiGLU() = default;
  SwiGLU(std::size_t dim, std::size_t hidden, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  Linear<T> gate;
  Linear<T> up;
  Linear<T> down;
};

// Pre-norm residual block: x + attn(norm(x)), then x + ffn(norm(x)).
template <typename T>
class Block {
 public:
  Block() = default;
  Block(const BlockConfig& config, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, AttentionMode mode) const;
  Tensor<T> step(const Tensor<T>& x, KvCache<T>& cache) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  LayerNorm<T> norm1;
  Attention<T> attn;
  LayerNorm<T> norm2;
  SwiGLU<T> ffn;
};

// depth blocks followed by a final LayerNorm.
template <typename T>
class BlockStack {
 public:
  using Cache = std::vector<KvCache<T>>;

  BlockStack() = default;
  BlockStack(const BlockConfig& config, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  // Causal incremental pass; only valid for AttentionMode::Causal stacks.
  Tensor<T> step(const Tensor<T>& x, Cache& cache) const;
  Cache empty_cache() const { return Cache(blocks.size()); }
  void collect(ParamList<T>& out, const std::string& prefix) const;

  const BlockConfig& config() const { return config_; }

  std::vector<Block<T>> blocks;
  LayerNorm<T> final_norm;

 private:
  BlockConfig config_;
};

// Learned factorized 2D positions: row and column embeddings summed.
template <typename T>
class PosEmbed2D {
 public:
  PosEmbed2D() = default;
  PosEmbed2D(std::size_t rows, std::size_t cols, std::size_t dim, Rng& rng);

  Tensor<T> full() const;                    // [rows * cols, dim]
  Tensor<T> at(std::size_t position) const;  // [1, dim], raster position
  void collect(ParamList<T>& out, const std::string& prefix) const;

  std::size_t rows() const { return row.dim(0); }
  std::size_t cols() const { return col.dim(0); }

  Tensor<T> row;
  Tensor<T> col;
};

// [H, W, 3] image -> [(H/P)*(W/P), P*P*3] raster-ordered patches, each patch
// flattened as (py, px, channel).
template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& image, std::size_t patch);
// Inverse of image_to_patches.
template <typename T>
Tensor<T> patches_to_image(const Tensor<T>& patches, std::size_t rows, std::size_t cols, std::size_t patch);

template <typename T>
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(std::size_t resolution, std::size_t patch, std::size_t embed_dim, Rng& rng, double init_std = 0.02);

  TokenGrid<T> forward(const Tensor<T>& image) const;
  // Linear projection only, before positions are added.
  Tensor<T> project(const Tensor<T>& image) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  std::size_t patch() const { return patch_; }
  std::size_t grid() const { return grid_; }

  Linear<T> proj;
  PosEmbed2D<T> pos;

 private:
  std::size_t patch_ = 0;
  std::size_t grid_ = 0;
};

// Channel-to-space: every token's channels split into r*r contiguous blocks
// placed as an r x r sub-grid in raster order. Token count grows by r*r.
template <typename T>
TokenGrid<T> grid_shuffle(const TokenGrid<T>& grid, std::size_t r);
template <typename T>
TokenGrid<T> grid_unshuffle(const TokenGrid<T>& grid, std::size_t r);

// Additive mask [n, past + n]: 0 where visible, a large negative value where
// key position > past + query row.
template <typename T>
Tensor<T> causal_mask(std::size_t n, std::size_t past);

}  // namespace mingtok::vit
