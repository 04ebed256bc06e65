#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenizer/mingtok.hpp"

namespace mingtok::ar {

using nn::ParamList;
using nn::Rng;
using nn::Tensor;

// Byte-level vocabulary plus modality/control markers.
namespace vocab {
inline constexpr std::size_t kBOS = 256;
inline constexpr std::size_t kEOS = 257;
inline constexpr std::size_t kBOI = 258;  // begin of image
inline constexpr std::size_t kEOI = 259;  // end of image
inline constexpr std::size_t kPAD = 260;
inline constexpr std::size_t kSize = 261;

std::string name(std::size_t id);
std::vector<std::size_t> encode_bytes(const std::string& text);
}  // namespace vocab

// One slot of a mixed sequence: a text token or a visual latent together with
// its semantic expansion.
template <typename T>
struct SequenceItem {
  enum class Kind { Text, Visual };

  Kind kind = Kind::Text;
  std::size_t token = 0;
  Tensor<T> latent;    // [latent_dim]
  Tensor<T> semantic;  // [semantic_dim]; required whenever the item is fed to the backbone

  static SequenceItem text(std::size_t id);
  static SequenceItem visual(Tensor<T> latent, Tensor<T> semantic = {});
  bool is_text() const { return kind == Kind::Text; }
  bool is_visual() const { return kind == Kind::Visual; }
};

template <typename T>
using Sequence = std::vector<SequenceItem<T>>;

struct FlowHeadConfig {
  std::size_t cond_dim = 0;
  std::size_t latent_dim = 0;
  std::size_t hidden = 64;
  std::size_t depth = 2;
  std::size_t time_dim = 16;
  std::size_t steps = 20;  // default Euler steps K

  void validate() const;
};

struct BackboneConfig {
  std::size_t width = 64;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t max_context = 512;
  std::size_t semantic_dim = 0;
  std::size_t latent_dim = 0;
  FlowHeadConfig flow;

  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  // Defaults sized for a tokenizer config.
  static BackboneConfig for_tokenizer(const tok::MingTokConfig& tokenizer);
};

// [N] times in [0,1] -> [N, dim] sinusoidal features (cos | sin halves).
template <typename T>
Tensor<T> time_embedding(const std::vector<double>& t, std::size_t dim);

// Per-token velocity predictor: concat(x_t, time features, z) -> linear ->
// depth pre-norm SwiGLU residual blocks -> norm -> linear to latent_dim.
template <typename T>
class FlowHead {
 public:
  FlowHead() = default;
  FlowHead(const FlowHeadConfig& config, Rng& rng);

  // x [N, latent], t [N], z [N, cond] -> v [N, latent]
  Tensor<T> velocity(const Tensor<T>& x, const std::vector<double>& t, const Tensor<T>& z) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  const FlowHeadConfig& config() const { return config_; }

 private:
  FlowHeadConfig config_;
  vit::Linear<T> in_;
  std::vector<vit::LayerNorm<T>> norms_;
  std::vector<vit::SwiGLU<T>> blocks_;
  vit::LayerNorm<T> out_norm_;
  vit::Linear<T> out_;
};

// Rectified-flow regression at given noise and times:
// x_t = (1 - t) x0 + t x1, loss = MSE(v(x_t, t, z), x1 - x0).
template <typename T>
Tensor<T> flow_loss_at(const FlowHead<T>& head, const Tensor<T>& z, const Tensor<T>& x1, const Tensor<T>& x0,
                       const std::vector<double>& t);
// Same with t ~ U(0,1) and x0 ~ N(0, I) drawn from rng (one per row).
// z [N, cond] (or [cond]), x1 [N, latent] (or [latent]).
template <typename T>
Tensor<T> flow_train_loss(const FlowHead<T>& head, const Tensor<T>& z, const Tensor<T>& x1, Rng& rng);

// Interpolant point used by the loss, exposed for endpoint checks.
template <typename T>
Tensor<T> flow_interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t);

// v(x [1, latent], t) -> [1, latent]
template <typename T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>&, double)>;

// Euler integration x <- x + v(x, k/K) / K for k = 0..K-1, from x0 [latent].
template <typename T>
Tensor<T> flow_integrate(const VelocityFn<T>& v, const Tensor<T>& x0, std::size_t steps);
// Draws x0 ~ N(0, I) from rng and integrates the head conditioned on z [cond].
template <typename T>
Tensor<T> flow_sample(const FlowHead<T>& head, const Tensor<T>& z, std::size_t steps, Rng& rng);

// Backbone + connector + heads. The tokenizer is held separately.
template <typename T>
class UnifiedModel {
 public:
  using Cache = typename vit::BlockStack<T>::Cache;

  UnifiedModel(const BackboneConfig& config, std::uint64_t seed);
  UnifiedModel(const UnifiedModel&) = delete;
  UnifiedModel& operator=(const UnifiedModel&) = delete;

  const BackboneConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // semantic [n, semantic_dim] -> [n, width] (two linear layers with GELU).
  Tensor<T> connect(const Tensor<T>& semantic) const;
  // Items -> [n, width] with learned positions start..start+n-1 added.
  Tensor<T> embed_items(const Sequence<T>& items, std::size_t start = 0) const;
  Tensor<T> embed_sequence(const Sequence<T>& items) const { return embed_items(items, 0); }
  Tensor<T> backbone_forward(const Tensor<T>& embedded) const;
  Cache empty_cache() const { return backbone_.empty_cache(); }
  Tensor<T> backbone_step(const Tensor<T>& embedded, Cache& cache) const;
  Tensor<T> text_logits(const Tensor<T>& hidden) const;
  // Greedy when temperature <= 0, otherwise samples softmax(logits / temperature).
  std::size_t text_step(const Tensor<T>& hidden_row, double temperature, Rng& rng) const;

  const FlowHead<T>& flow() const { return flow_; }

  // Namespaced: backbone.*, connector.*, text.*, pos, head.text.*, head.flow.*
  ParamList<T> parameters() const;

  // Container at path plus a JSON sidecar naming the tokenizer checkpoint.
  void save(const std::filesystem::path& path, const std::filesystem::path& tokenizer_checkpoint) const;
  struct Loaded {
    std::unique_ptr<UnifiedModel> model;
    std::filesystem::path tokenizer_checkpoint;
  };
  static Loaded load(const std::filesystem::path& path);

 private:
  BackboneConfig config_;
  std::uint64_t seed_;
  Tensor<T> text_table_;
  Tensor<T> positions_;
  vit::Linear<T> connector_in_;
  vit::Linear<T> connector_out_;
  vit::BlockStack<T> backbone_;
  vit::Linear<T> text_head_;
  FlowHead<T> flow_;
};

enum class GenerationMode { Incremental, Recompute };

template <typename T>
struct GeneratedImage {
  tok::LatentSeq<T> latents;
  tok::SemanticSeq<T> semantics;
};

// Autoregressive latent generation after a prefix that ends with BOI. Each
// sampled latent is expanded immediately and fed back through the connector.
// Exactly tokens() latents are produced; the caller appends EOI.
template <typename T>
GeneratedImage<T> generate_image(const UnifiedModel<T>& model, const tok::MingTok<T>& tokenizer,
                                 const Sequence<T>& prefix, std::size_t steps, Rng& rng,
                                 GenerationMode mode = GenerationMode::Incremental);

struct JointWeights {
  double text = 1.0;
  double flow = 1.0;
};

template <typename T>
struct JointLoss {
  Tensor<T> text;   // undefined when the batch has no text targets
  Tensor<T> flow;   // undefined when the batch has no visual targets
  Tensor<T> total;
  std::size_t text_slots = 0;
  std::size_t visual_slots = 0;
};

// Teacher-forced loss: position i predicts item i+1, cross-entropy when it is
// text, rectified-flow loss on its latent when it is visual.
template <typename T>
JointLoss<T> joint_loss(const UnifiedModel<T>& model, const std::vector<Sequence<T>>& batch, Rng& rng,
                        JointWeights weights = {});

}  // namespace mingtok::ar
