#include "vit/blocks.hpp"

#include <cmath>

namespace mingtok::vit {

using namespace mingtok::nn;

const char* to_string(AttentionMode mode) { return mode == AttentionMode::Full ? "Full" : "Causal"; }

AttentionMode attention_mode_from(const std::string& name) {
  if (name == "Full" || name == "full") return AttentionMode::Full;
  if (name == "Causal" || name == "causal") return AttentionMode::Causal;
  throw ValidationError("unknown attention mode '" + name + "'");
}

std::size_t BlockConfig::ffn_hidden() const {
  const double raw = ffn_hidden_factor * static_cast<double>(embed_dim);
  const auto h = static_cast<std::size_t>(std::ceil(raw / 8.0 - 1e-9));
  return std::max<std::size_t>(h, 1) * 8;
}

void BlockConfig::validate(const std::string& what) const {
  if (embed_dim == 0 || num_heads == 0 || head_dim == 0) {
    throw ValidationError(what + ": embed_dim, num_heads and head_dim must be positive");
  }
  if (num_heads * head_dim != embed_dim) {
    throw ValidationError(what + ": num_heads * head_dim (" + std::to_string(num_heads) + " * " +
                          std::to_string(head_dim) + ") != embed_dim " + std::to_string(embed_dim));
  }
  if (ffn_hidden_factor <= 0) throw ValidationError(what + ": ffn_hidden_factor must be positive");
}

std::size_t BlockConfig::parameter_count() const {
  const std::size_t d = embed_dim;
  const std::size_t h = ffn_hidden();
  const std::size_t per_block = 2 * d + 2 * d  // two norms
                                + d * 3 * d + d * d  // qkv + proj
                                + 3 * d * h;         // swiglu
  return depth * per_block + 2 * d;
}

template <typename T>
Tensor<T> normal_param(Rng& rng, Shape shape, double stddev) {
  const std::size_t n = shape_numel(shape);
  return Tensor<T>::parameter(std::move(shape), rng.normal_vector<T>(n, stddev));
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double init_std)
    : weight(normal_param<T>(rng, {in, out}, init_std)) {
  if (with_bias) bias = Tensor<T>::parameter({out}, std::vector<T>(out, T(0)));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : scale(Tensor<T>::parameter({dim}, std::vector<T>(dim, T(1)))),
      shift(Tensor<T>::parameter({dim}, std::vector<T>(dim, T(0)))) {}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, scale, shift);
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".scale", scale});
  out.push_back({prefix + ".shift", shift});
}

template <typename T>
Tensor<T> causal_mask(std::size_t n, std::size_t past) {
  const std::size_t keys = past + n;
  std::vector<T> m(n * keys, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = past + i + 1; j < keys; ++j) m[i * keys + j] = T(-1e30);
  }
  return Tensor<T>::from({n, keys}, std::move(m));
}

template <typename T>
Attention<T>::Attention(std::size_t embed_dim, std::size_t num_heads, Rng& rng)
    : qkv(embed_dim, 3 * embed_dim, false, rng), proj(embed_dim, embed_dim, false, rng),
      embed_dim_(embed_dim), num_heads_(num_heads) {}

namespace {

// [n, 3D] projections -> per-head q [H,n,hd], k [H,n,hd], v [H,n,hd].
template <typename T>
void split_heads(const Tensor<T>& qkv, std::size_t d, std::size_t heads, Tensor<T>& q, Tensor<T>& k,
                 Tensor<T>& v) {
  const std::size_t n = qkv.dim(0);
  const std::size_t hd = d / heads;
  auto head_major = [&](std::size_t part) {
    return permute(reshape(slice(qkv, 1, part * d, (part + 1) * d), {n, heads, hd}), {1, 0, 2});
  };
  q = head_major(0);
  k = head_major(1);
  v = head_major(2);
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>* mask) {
  const std::size_t hd = q.dim(2);
  Tensor<T> scores = mul_scalar(matmul(q, permute(k, {0, 2, 1})), static_cast<T>(1.0 / std::sqrt(double(hd))));
  if (mask) scores = add(scores, *mask);
  return matmul(softmax(scores), v);
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& o) {
  const std::size_t heads = o.dim(0), n = o.dim(1), hd = o.dim(2);
  return reshape(permute(o, {1, 0, 2}), {n, heads * hd});
}

}  // namespace

template <typename T>
Tensor<T> Attention<T>::forward(const Tensor<T>& x, AttentionMode mode) const {
  if (x.rank() != 2 || x.dim(1) != embed_dim_) {
    throw ValidationError("attention: expected [T," + std::to_string(embed_dim_) + "], got " + shape_str(x.shape()));
  }
  Tensor<T> q, k, v;
  split_heads(qkv.forward(x), embed_dim_, num_heads_, q, k, v);
  Tensor<T> o;
  if (mode == AttentionMode::Causal) {
    const Tensor<T> mask = causal_mask<T>(x.dim(0), 0);
    o = attend(q, k, v, &mask);
  } else {
    o = attend<T>(q, k, v, nullptr);
  }
  return proj.forward(merge_heads(o));
}

template <typename T>
Tensor<T> Attention<T>::step(const Tensor<T>& x, KvCache<T>& cache) const {
  if (x.rank() != 2 || x.dim(1) != embed_dim_) {
    throw ValidationError("attention.step: expected [n," + std::to_string(embed_dim_) + "], got " +
                          shape_str(x.shape()));
  }
  Tensor<T> q, k, v;
  split_heads(qkv.forward(x), embed_dim_, num_heads_, q, k, v);
  const std::size_t past = cache.length();
  if (past > 0) {
    k = concat<T>({cache.keys, k}, 1);
    v = concat<T>({cache.values, v}, 1);
  }
  cache.keys = k;
  cache.values = v;
  Tensor<T> o;
  if (x.dim(0) > 1) {
    const Tensor<T> mask = causal_mask<T>(x.dim(0), past);
    o = attend(q, k, v, &mask);
  } else {
    o = attend<T>(q, k, v, nullptr);
  }
  return proj.forward(merge_heads(o));
}

template <typename T>
void Attention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  qkv.collect(out, prefix + ".qkv");
  proj.collect(out, prefix + ".proj");
}

template <typename T>
SwiGLU<T>::SwiGLU(std::size_t dim, std::size_t hidden, Rng& rng)
    : gate(dim, hidden, false, rng), up(dim, hidden, false, rng), down(hidden, dim, false, rng) {}

template <typename T>
Tensor<T> SwiGLU<T>::forward(const Tensor<T>& x) const {
  return down.forward(mul(silu(gate.forward(x)), up.forward(x)));
}

template <typename T>
void SwiGLU<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  gate.collect(out, prefix + ".gate");
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

template <typename T>
Block<T>::Block(const BlockConfig& config, Rng& rng)
    : norm1(config.embed_dim), attn(config.embed_dim, config.num_heads, rng), norm2(config.embed_dim),
      ffn(config.embed_dim, config.ffn_hidden(), rng) {}

template <typename T>
Tensor<T> Block<T>::forward(const Tensor<T>& x, AttentionMode mode) const {
  Tensor<T> h = add(x, attn.forward(norm1.forward(x), mode));
  return add(h, ffn.forward(norm2.forward(h)));
}

template <typename T>
Tensor<T> Block<T>::step(const Tensor<T>& x, KvCache<T>& cache) const {
  Tensor<T> h = add(x, attn.step(norm1.forward(x), cache));
  return add(h, ffn.forward(norm2.forward(h)));
}

template <typename T>
void Block<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  attn.collect(out, prefix + ".attn");
  norm2.collect(out, prefix + ".norm2");
  ffn.collect(out, prefix + ".ffn");
}

template <typename T>
BlockStack<T>::BlockStack(const BlockConfig& config, Rng& rng) : final_norm(config.embed_dim), config_(config) {
  config.validate("block stack");
  for (std::size_t i = 0; i < config.depth; ++i) blocks.emplace_back(config, rng);
}

template <typename T>
Tensor<T> BlockStack<T>::forward(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (const auto& b : blocks) h = b.forward(h, config_.attention);
  return final_norm.forward(h);
}

template <typename T>
Tensor<T> BlockStack<T>::step(const Tensor<T>& x, Cache& cache) const {
  if (config_.attention != AttentionMode::Causal) {
    throw ValidationError("block stack: incremental decoding requires causal attention");
  }
  if (cache.size() != blocks.size()) throw ValidationError("block stack: cache depth mismatch");
  Tensor<T> h = x;
  for (std::size_t i = 0; i < blocks.size(); ++i) h = blocks[i].step(h, cache[i]);
  return final_norm.forward(h);
}

template <typename T>
void BlockStack<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".blocks." + std::to_string(i));
  final_norm.collect(out, prefix + ".norm");
}

template <typename T>
PosEmbed2D<T>::PosEmbed2D(std::size_t rows, std::size_t cols, std::size_t dim, Rng& rng)
    : row(normal_param<T>(rng, {rows, dim}, 0.02)), col(normal_param<T>(rng, {cols, dim}, 0.02)) {}

template <typename T>
Tensor<T> PosEmbed2D<T>::full() const {
  const std::size_t r = rows(), c = cols(), d = row.dim(1);
  Tensor<T> grid = add(reshape(row, {r, 1, d}), reshape(col, {1, c, d}));
  return reshape(grid, {r * c, d});
}

template <typename T>
Tensor<T> PosEmbed2D<T>::at(std::size_t position) const {
  if (position >= rows() * cols()) {
    throw ValidationError("position " + std::to_string(position) + " outside a " + std::to_string(rows()) + "x" +
                          std::to_string(cols()) + " grid");
  }
  return add(slice(row, 0, position / cols(), position / cols() + 1),
             slice(col, 0, position % cols(), position % cols() + 1));
}

template <typename T>
void PosEmbed2D<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".row", row});
  out.push_back({prefix + ".col", col});
}

template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ValidationError("patch_embed: expected [H,W,3] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ValidationError("patch_embed: patch " + std::to_string(patch) + " does not divide " + std::to_string(h) +
                          "x" + std::to_string(w));
  }
  const std::size_t gr = h / patch, gc = w / patch;
  Tensor<T> x = reshape(image, {gr, patch, gc, patch, 3});
  return reshape(permute(x, {0, 2, 1, 3, 4}), {gr * gc, patch * patch * 3});
}

template <typename T>
Tensor<T> patches_to_image(const Tensor<T>& patches, std::size_t rows, std::size_t cols, std::size_t patch) {
  if (patches.rank() != 2 || patches.dim(0) != rows * cols || patches.dim(1) != patch * patch * 3) {
    throw ValidationError("patches_to_image: got " + shape_str(patches.shape()) + " for a " + std::to_string(rows) +
                          "x" + std::to_string(cols) + " grid of " + std::to_string(patch) + "px patches");
  }
  Tensor<T> x = reshape(patches, {rows, cols, patch, patch, 3});
  return reshape(permute(x, {0, 2, 1, 3, 4}), {rows * patch, cols * patch, 3});
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t resolution, std::size_t patch, std::size_t embed_dim, Rng& rng,
                          double init_std)
    : proj(patch * patch * 3, embed_dim, true, rng, init_std),
      pos(patch ? resolution / patch : 0, patch ? resolution / patch : 0, embed_dim, rng),
      patch_(patch),
      grid_(patch ? resolution / patch : 0) {
  if (patch == 0 || resolution % patch != 0) {
    throw ValidationError("patch_embed: patch " + std::to_string(patch) + " does not divide resolution " +
                          std::to_string(resolution));
  }
}

template <typename T>
Tensor<T> PatchEmbed<T>::project(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(0) != grid_ * patch_ || image.dim(1) != grid_ * patch_) {
    throw ValidationError("patch_embed: expected [" + std::to_string(grid_ * patch_) + "," +
                          std::to_string(grid_ * patch_) + ",3] image, got " + shape_str(image.shape()));
  }
  return proj.forward(image_to_patches(image, patch_));
}

template <typename T>
TokenGrid<T> PatchEmbed<T>::forward(const Tensor<T>& image) const {
  return {grid_, grid_, add(project(image), pos.full())};
}

template <typename T>
void PatchEmbed<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  proj.collect(out, prefix + ".proj");
  pos.collect(out, prefix + ".pos");
}

template <typename T>
TokenGrid<T> grid_shuffle(const TokenGrid<T>& grid, std::size_t r) {
  const std::size_t d = grid.channels();
  if (r == 0 || d % (r * r) != 0) {
    throw ValidationError("grid_shuffle: r*r = " + std::to_string(r * r) + " does not divide " + std::to_string(d) +
                          " channels");
  }
  const std::size_t c = d / (r * r);
  // [g_r, g_c, a, s, c] -> [g_r, a, g_c, s, c]
  Tensor<T> x = reshape(grid.tokens, {grid.rows, grid.cols, r, r, c});
  x = reshape(permute(x, {0, 2, 1, 3, 4}), {grid.rows * r * grid.cols * r, c});
  return {grid.rows * r, grid.cols * r, x};
}

template <typename T>
TokenGrid<T> grid_unshuffle(const TokenGrid<T>& grid, std::size_t r) {
  if (r == 0 || grid.rows % r != 0 || grid.cols % r != 0) {
    throw ValidationError("grid_unshuffle: r = " + std::to_string(r) + " does not divide grid " +
                          std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  }
  const std::size_t c = grid.channels();
  const std::size_t gr = grid.rows / r, gc = grid.cols / r;
  Tensor<T> x = reshape(grid.tokens, {gr, r, gc, r, c});
  x = reshape(permute(x, {0, 2, 1, 3, 4}), {gr * gc, r * r * c});
  return {gr, gc, x};
}

#define MINGTOK_INSTANTIATE_VIT(T)                                                                    \
  template Tensor<T> normal_param<T>(Rng&, Shape, double);                                            \
  template class Linear<T>;                                                                           \
  template class LayerNorm<T>;                                                                        \
  template class Attention<T>;                                                                        \
  template class SwiGLU<T>;                                                                           \
  template class Block<T>;                                                                            \
  template class BlockStack<T>;                                                                       \
  template class PosEmbed2D<T>;                                                                       \
  template class PatchEmbed<T>;                                                                       \
  template Tensor<T> image_to_patches(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> patches_to_image(const Tensor<T>&, std::size_t, std::size_t, std::size_t);       \
  template TokenGrid<T> grid_shuffle(const TokenGrid<T>&, std::size_t);                               \
  template TokenGrid<T> grid_unshuffle(const TokenGrid<T>&, std::size_t);                             \
  template Tensor<T> causal_mask<T>(std::size_t, std::size_t);

MINGTOK_INSTANTIATE_VIT(float)
MINGTOK_INSTANTIATE_VIT(double)

}  // namespace mingtok::vit
