#include "tokenizer/mingtok.hpp"

#include <fstream>
#include <set>

#include "numerics/container.hpp"

namespace mingtok::tok {

using namespace mingtok::nn;
using json = nlohmann::json;

namespace {

json block_to_json(const BlockConfig& b) {
  return json{{"embed_dim", b.embed_dim},   {"depth", b.depth},
              {"num_heads", b.num_heads},   {"head_dim", b.head_dim},
              {"ffn_hidden_factor", b.ffn_hidden_factor}, {"attention", vit::to_string(b.attention)}};
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  std::string bad;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
  }
  if (!bad.empty()) throw ValidationError(where + ": unknown keys: " + bad);
  std::string missing;
  for (const auto& k : allowed) {
    if (!j.contains(k)) missing += (missing.empty() ? "" : ", ") + k;
  }
  if (!missing.empty()) throw ValidationError(where + ": missing keys: " + missing);
}

template <typename V>
V get_as(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError(where + ": bad value for '" + key + "'");
  }
}

BlockConfig block_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"embed_dim", "depth", "num_heads", "head_dim", "ffn_hidden_factor", "attention"}, where);
  BlockConfig b;
  b.embed_dim = get_as<std::size_t>(j, "embed_dim", where);
  b.depth = get_as<std::size_t>(j, "depth", where);
  b.num_heads = get_as<std::size_t>(j, "num_heads", where);
  b.head_dim = get_as<std::size_t>(j, "head_dim", where);
  b.ffn_hidden_factor = get_as<double>(j, "ffn_hidden_factor", where);
  b.attention = vit::attention_mode_from(get_as<std::string>(j, "attention", where));
  return b;
}

BlockConfig block(std::size_t dim, std::size_t depth, std::size_t heads, vit::AttentionMode mode) {
  BlockConfig b;
  b.embed_dim = dim;
  b.depth = depth;
  b.num_heads = heads;
  b.head_dim = dim / heads;
  b.attention = mode;
  return b;
}

}  // namespace

void MingTokConfig::validate() const {
  if (resolution == 0 || base_patch == 0 || pixel_patch == 0 || latent_dim == 0) {
    throw ValidationError("tokenizer config: resolution, patches and latent_dim must be positive");
  }
  if (resolution % base_patch != 0) {
    throw ValidationError("tokenizer config: base_patch " + std::to_string(base_patch) +
                          " does not divide resolution " + std::to_string(resolution));
  }
  if (base_patch % pixel_patch != 0) {
    throw ValidationError("tokenizer config: pixel_patch " + std::to_string(pixel_patch) +
                          " does not divide base_patch " + std::to_string(base_patch));
  }
  low.validate("tokenizer config: low");
  sem.validate("tokenizer config: sem");
  pix.validate("tokenizer config: pix");
  if (low.attention != vit::AttentionMode::Full || pix.attention != vit::AttentionMode::Full) {
    throw ValidationError("tokenizer config: low and pix stacks use full attention");
  }
  if (sem.attention != vit::AttentionMode::Causal) {
    throw ValidationError("tokenizer config: sem stack uses causal attention");
  }
  const std::size_t r = shuffle_factor();
  if (semantic_dim() % (r * r) != 0) {
    throw ValidationError("tokenizer config: shuffle factor^2 = " + std::to_string(r * r) +
                          " does not divide semantic dim " + std::to_string(semantic_dim()));
  }
  if (low.embed_dim % latent_dim != 0 || semantic_dim() % latent_dim != 0) {
    throw ValidationError("tokenizer config: latent_dim " + std::to_string(latent_dim) +
                          " must divide low and semantic widths");
  }
}

std::size_t MingTokConfig::parameter_count() const {
  const std::size_t g = grid(), pg = pixel_grid();
  const std::size_t D = low.embed_dim, S = semantic_dim(), P = pix.embed_dim, d = latent_dim;
  const std::size_t out = pixel_patch * pixel_patch * 3;
  std::size_t n = 0;
  n += base_patch * base_patch * 3 * D + D + 2 * g * D + D;  // patch proj, pos, mask token
  n += low.parameter_count();
  n += D * d + d;  // shortcut.avg
  n += d * S + S;  // shortcut.rep
  n += 2 * g * S + sem.parameter_count();
  n += shuffled_dim() * P + P + 2 * pg * P + pix.parameter_count();
  n += P * out + out;
  return n;
}

json MingTokConfig::to_json() const {
  return json{{"preset", preset},         {"resolution", resolution}, {"base_patch", base_patch},
              {"pixel_patch", pixel_patch}, {"latent_dim", latent_dim}, {"low", block_to_json(low)},
              {"sem", block_to_json(sem)},  {"pix", block_to_json(pix)}};
}

MingTokConfig MingTokConfig::from_json(const json& j) {
  const std::string where = "tokenizer config";
  reject_unknown(j, {"preset", "resolution", "base_patch", "pixel_patch", "latent_dim", "low", "sem", "pix"}, where);
  MingTokConfig c;
  c.preset = get_as<std::string>(j, "preset", where);
  c.resolution = get_as<std::size_t>(j, "resolution", where);
  c.base_patch = get_as<std::size_t>(j, "base_patch", where);
  c.pixel_patch = get_as<std::size_t>(j, "pixel_patch", where);
  c.latent_dim = get_as<std::size_t>(j, "latent_dim", where);
  c.low = block_from_json(j.at("low"), where + ".low");
  c.sem = block_from_json(j.at("sem"), where + ".sem");
  c.pix = block_from_json(j.at("pix"), where + ".pix");
  c.validate();
  return c;
}

MingTokConfig MingTokConfig::preset_named(const std::string& name) {
  using vit::AttentionMode;
  MingTokConfig c;
  c.preset = name;
  if (name == "paper") {
    c.resolution = 512;
    c.base_patch = 32;
    c.pixel_patch = 16;
    c.latent_dim = 32;
    c.low = block(768, 12, 12, AttentionMode::Full);
    c.sem = block(1024, 24, 16, AttentionMode::Causal);
    c.pix = block(1024, 24, 16, AttentionMode::Full);
  } else if (name == "tiny") {
    c.resolution = 32;
    c.base_patch = 8;
    c.pixel_patch = 4;
    c.latent_dim = 8;
    c.low = block(64, 2, 2, AttentionMode::Full);
    c.sem = block(128, 2, 2, AttentionMode::Causal);
    c.pix = block(128, 2, 2, AttentionMode::Full);
  } else if (name == "micro") {
    c.resolution = 8;
    c.base_patch = 4;
    c.pixel_patch = 2;
    c.latent_dim = 4;
    c.low = block(8, 1, 2, AttentionMode::Full);
    c.sem = block(16, 1, 2, AttentionMode::Causal);
    c.pix = block(16, 1, 2, AttentionMode::Full);
  } else {
    throw ValidationError("unknown preset '" + name + "' (expected paper, tiny or micro)");
  }
  c.validate();
  return c;
}

std::vector<std::string> preset_names() { return {"paper", "tiny", "micro"}; }

std::size_t MaskPlan::masked_count() const {
  std::size_t n = 0;
  for (bool m : masked) n += m ? 1 : 0;
  return n;
}

std::vector<std::size_t> MaskPlan::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i]) out.push_back(i);
  }
  return out;
}

template <typename T>
Tensor<T> channel_average(const Tensor<T>& x, std::size_t d) {
  if (x.rank() != 2 || d == 0 || x.dim(1) % d != 0) {
    throw ValidationError("channel_average: " + std::to_string(d) + " groups do not divide " + shape_str(x.shape()));
  }
  const std::size_t t = x.dim(0), D = x.dim(1);
  return mean(reshape(x, {t, d, D / d}), 2);
}

template <typename T>
Tensor<T> channel_repeat(const Tensor<T>& x, std::size_t D) {
  if (x.rank() != 2 || x.dim(1) == 0 || D % x.dim(1) != 0) {
    throw ValidationError("channel_repeat: " + shape_str(x.shape()) + " channels do not divide " + std::to_string(D));
  }
  const std::size_t t = x.dim(0), d = x.dim(1);
  const Tensor<T> ones = Tensor<T>::full({D / d}, T(1));
  return reshape(mul(reshape(x, {t, d, 1}), ones), {t, D});
}

template <typename T>
ChannelAverageShortcut<T>::ChannelAverageShortcut(std::size_t in, std::size_t out, Rng& rng)
    : proj(in, out, true, rng) {}

template <typename T>
Tensor<T> ChannelAverageShortcut<T>::forward(const Tensor<T>& x) const {
  return add(channel_average(x, proj.out_features()), proj.forward(x));
}

template <typename T>
ChannelRepeatShortcut<T>::ChannelRepeatShortcut(std::size_t in, std::size_t out, Rng& rng)
    : proj(in, out, true, rng) {}

template <typename T>
Tensor<T> ChannelRepeatShortcut<T>::forward(const Tensor<T>& x) const {
  return add(channel_repeat(x, proj.out_features()), proj.forward(x));
}

namespace {

template <typename T>
const MingTokConfig& validated(const MingTokConfig& c) {
  c.validate();
  return c;
}

}  // namespace

template <typename T>
MingTok<T>::MingTok(const MingTokConfig& config, std::uint64_t seed)
    : config_(validated<T>(config)), seed_(seed) {
  Rng rng(seed);
  const auto& c = config_;
  low_patch_ = vit::PatchEmbed<T>(c.resolution, c.base_patch, c.low.embed_dim, rng);
  mask_token_ = vit::normal_param<T>(rng, {c.low.embed_dim}, 0.02);
  low_blocks_ = vit::BlockStack<T>(c.low, rng);
  to_latent_ = ChannelAverageShortcut<T>(c.low.embed_dim, c.latent_dim, rng);
  from_latent_ = ChannelRepeatShortcut<T>(c.latent_dim, c.semantic_dim(), rng);
  sem_pos_ = vit::PosEmbed2D<T>(c.grid(), c.grid(), c.semantic_dim(), rng);
  sem_blocks_ = vit::BlockStack<T>(c.sem, rng);
  pix_in_ = vit::Linear<T>(c.shuffled_dim(), c.pix.embed_dim, true, rng);
  pix_pos_ = vit::PosEmbed2D<T>(c.pixel_grid(), c.pixel_grid(), c.pix.embed_dim, rng);
  pix_blocks_ = vit::BlockStack<T>(c.pix, rng);
  pix_head_ = vit::Linear<T>(c.pix.embed_dim, c.pixel_patch * c.pixel_patch * 3, true, rng);
}

template <typename T>
void MingTok<T>::check_image(const Tensor<T>& image) const {
  const std::size_t r = config_.resolution;
  if (image.rank() != 3 || image.dim(0) != r || image.dim(1) != r || image.dim(2) != 3) {
    throw ValidationError("tokenizer: expected a " + std::to_string(r) + "x" + std::to_string(r) +
                          "x3 image, got " + shape_str(image.shape()));
  }
  if (!nn::all_finite(image)) throw NumericError("tokenizer: input image contains non-finite values");
}

template <typename T>
void MingTok<T>::check_latents(const Tensor<T>& latents, std::size_t max_rows) const {
  if (latents.rank() != 2 || latents.dim(1) != config_.latent_dim || latents.dim(0) > max_rows) {
    throw ValidationError("tokenizer: expected latents [<=" + std::to_string(max_rows) + "," +
                          std::to_string(config_.latent_dim) + "], got " + shape_str(latents.shape()));
  }
}

template <typename T>
LatentSeq<T> MingTok<T>::encode(const Tensor<T>& image, const MaskPlan* mask) const {
  check_image(image);
  ++encode_calls_;
  const std::size_t n = config_.tokens();
  const std::size_t D = config_.low.embed_dim;
  Tensor<T> x = low_patch_.project(image);
  if (mask != nullptr) {
    if (mask->total != n || mask->masked.size() != n) {
      throw ValidationError("encode: mask plan covers " + std::to_string(mask->masked.size()) + " tokens, grid has " +
                            std::to_string(n));
    }
    if (!mask->empty()) {
      std::vector<T> m(n), keep(n);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = mask->masked[i] ? T(1) : T(0);
        keep[i] = T(1) - m[i];
      }
      x = add(mul(x, Tensor<T>::from({n, 1}, keep)),
              mul(Tensor<T>::from({n, 1}, m), reshape(mask_token_, {1, D})));
    }
  }
  x = add(x, low_patch_.pos.full());
  Tensor<T> z = to_latent_.forward(low_blocks_.forward(x));
  return {config_.grid(), config_.grid(), z};
}

template <typename T>
Tensor<T> MingTok<T>::expand_prefix(const Tensor<T>& latents) const {
  check_latents(latents, config_.tokens());
  const std::size_t n = latents.dim(0);
  Tensor<T> x = add(from_latent_.forward(latents), slice(sem_pos_.full(), 0, 0, n));
  return sem_blocks_.forward(x);
}

template <typename T>
SemanticSeq<T> MingTok<T>::expand(const LatentSeq<T>& latents) const {
  if (latents.rows != config_.grid() || latents.cols != config_.grid() || latents.tokens.dim(0) != config_.tokens()) {
    throw ValidationError("expand: latent grid " + std::to_string(latents.rows) + "x" + std::to_string(latents.cols) +
                          " does not match tokenizer grid " + std::to_string(config_.grid()));
  }
  ++expand_calls_;
  return {latents.rows, latents.cols, expand_prefix(latents.tokens)};
}

template <typename T>
DecoderState<T> MingTok<T>::begin_expand() const {
  DecoderState<T> s;
  s.cache = sem_blocks_.empty_cache();
  s.total = config_.tokens();
  return s;
}

template <typename T>
Tensor<T> MingTok<T>::expand_step(DecoderState<T>& state, const Tensor<T>& latent) const {
  if (state.position >= state.total) {
    throw ValidationError("expand_step: all " + std::to_string(state.total) + " positions already decoded");
  }
  Tensor<T> row = latent.rank() == 1 ? reshape(latent, {1, latent.numel()}) : latent;
  if (row.rank() != 2 || row.dim(0) != 1 || row.dim(1) != config_.latent_dim) {
    throw ValidationError("expand_step: expected one latent of width " + std::to_string(config_.latent_dim) +
                          ", got " + shape_str(latent.shape()));
  }
  ++expand_step_calls_;
  Tensor<T> x = add(from_latent_.forward(row), sem_pos_.at(state.position));
  Tensor<T> h = sem_blocks_.step(x, state.cache);
  ++state.position;
  return reshape(h, {config_.semantic_dim()});
}

template <typename T>
Tensor<T> MingTok<T>::decode_pixels(const SemanticSeq<T>& semantics) const {
  const std::size_t g = config_.grid();
  if (semantics.rows != g || semantics.cols != g || semantics.tokens.rank() != 2 ||
      semantics.tokens.dim(0) != config_.tokens() || semantics.tokens.dim(1) != config_.semantic_dim()) {
    throw ValidationError("decode_pixels: expected semantics [" + std::to_string(config_.tokens()) + "," +
                          std::to_string(config_.semantic_dim()) + "], got " + shape_str(semantics.tokens.shape()));
  }
  ++decode_calls_;
  vit::TokenGrid<T> grid{g, g, semantics.tokens};
  vit::TokenGrid<T> fine = vit::grid_shuffle(grid, config_.shuffle_factor());
  Tensor<T> x = add(pix_in_.forward(fine.tokens), pix_pos_.full());
  Tensor<T> patches = pix_head_.forward(pix_blocks_.forward(x));
  return vit::patches_to_image(patches, fine.rows, fine.cols, config_.pixel_patch);
}

template <typename T>
Tensor<T> MingTok<T>::reconstruct(const Tensor<T>& image) const {
  return decode_pixels(expand(encode(image)));
}

template <typename T>
ParamList<T> MingTok<T>::parameters() const {
  ParamList<T> out;
  low_patch_.collect(out, "low.patch");
  out.push_back({"low.mask_token", mask_token_});
  low_blocks_.collect(out, "low");
  to_latent_.collect(out, "shortcut.avg");
  from_latent_.collect(out, "shortcut.rep");
  sem_pos_.collect(out, "sem.pos");
  sem_blocks_.collect(out, "sem");
  pix_in_.collect(out, "pix.in");
  pix_pos_.collect(out, "pix.pos");
  pix_blocks_.collect(out, "pix");
  pix_head_.collect(out, "pix.head");
  return out;
}

template <typename T>
CallCounts MingTok<T>::counts() const {
  return {encode_calls_.load(), expand_calls_.load(), expand_step_calls_.load(), decode_calls_.load()};
}

template <typename T>
void MingTok<T>::reset_counts() {
  encode_calls_ = 0;
  expand_calls_ = 0;
  expand_step_calls_ = 0;
  decode_calls_ = 0;
}

std::filesystem::path sidecar_path(const std::filesystem::path& container) {
  std::filesystem::path p = container;
  p.replace_extension(".json");
  return p;
}

template <typename T>
void MingTok<T>::save(const std::filesystem::path& path) const {
  write_container(path, to_arrays(parameters()));
  json meta{{"format", "mingtok-tokenizer"},
            {"config", config_.to_json()},
            {"seed", seed_},
            {"rng", Rng::kAlgorithm}};
  std::ofstream os(sidecar_path(path));
  if (!os) throw IoError("cannot write '" + sidecar_path(path).string() + "'");
  os << meta.dump(2) << '\n';
}

template <typename T>
std::unique_ptr<MingTok<T>> MingTok<T>::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("tokenizer checkpoint '" + path.string() + "' not found");
  const auto side = sidecar_path(path);
  std::ifstream is(side);
  if (!is) throw IoError("cannot open '" + side.string() + "'");
  json meta;
  try {
    meta = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "mingtok-tokenizer") {
    throw IoError(side.string() + ": not a tokenizer checkpoint");
  }
  auto model = std::make_unique<MingTok<T>>(MingTokConfig::from_json(meta.at("config")),
                                            meta.value("seed", std::uint64_t{0}));
  load_arrays(model->parameters(), read_container(path));
  return model;
}

template Tensor<float> channel_average(const Tensor<float>&, std::size_t);
template Tensor<double> channel_average(const Tensor<double>&, std::size_t);
template Tensor<float> channel_repeat(const Tensor<float>&, std::size_t);
template Tensor<double> channel_repeat(const Tensor<double>&, std::size_t);
template class ChannelAverageShortcut<float>;
template class ChannelAverageShortcut<double>;
template class ChannelRepeatShortcut<float>;
template class ChannelRepeatShortcut<double>;
template class MingTok<float>;
template class MingTok<double>;

}  // namespace mingtok::tok
