#include "unified/backbone.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "numerics/container.hpp"

namespace mingtok::ar {

using namespace mingtok::nn;
using json = nlohmann::json;

namespace vocab {

std::string name(std::size_t id) {
  switch (id) {
    case kBOS: return "BOS";
    case kEOS: return "EOS";
    case kBOI: return "BOI";
    case kEOI: return "EOI";
    case kPAD: return "PAD";
    default: break;
  }
  if (id < 256) return "byte:" + std::to_string(id);
  throw ValidationError("vocab: token id " + std::to_string(id) + " out of range");
}

std::vector<std::size_t> encode_bytes(const std::string& text) {
  std::vector<std::size_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

}  // namespace vocab

template <typename T>
SequenceItem<T> SequenceItem<T>::text(std::size_t id) {
  if (id >= vocab::kSize) throw ValidationError("sequence: token id " + std::to_string(id) + " out of range");
  SequenceItem item;
  item.kind = Kind::Text;
  item.token = id;
  return item;
}

template <typename T>
SequenceItem<T> SequenceItem<T>::visual(Tensor<T> latent, Tensor<T> semantic) {
  SequenceItem item;
  item.kind = Kind::Visual;
  item.latent = std::move(latent);
  item.semantic = std::move(semantic);
  return item;
}

void FlowHeadConfig::validate() const {
  if (cond_dim == 0 || latent_dim == 0 || hidden == 0 || time_dim == 0) {
    throw ValidationError("flow head: widths must be positive");
  }
  if (time_dim % 2 != 0) throw ValidationError("flow head: time_dim must be even");
  if (depth < 1) throw ValidationError("flow head: depth must be >= 1");
  if (steps < 1) throw ValidationError("flow head: K must be >= 1");
}

void BackboneConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ValidationError("backbone: width " + std::to_string(width) + " must be a positive multiple of heads " +
                          std::to_string(heads));
  }
  if (max_context == 0) throw ValidationError("backbone: max_context must be positive");
  if (semantic_dim == 0 || latent_dim == 0) throw ValidationError("backbone: semantic_dim and latent_dim must be set");
  if (flow.cond_dim != width || flow.latent_dim != latent_dim) {
    throw ValidationError("backbone: flow head must be conditioned on width and predict latent_dim");
  }
  flow.validate();
}

json BackboneConfig::to_json() const {
  return json{{"width", width},
              {"depth", depth},
              {"heads", heads},
              {"max_context", max_context},
              {"semantic_dim", semantic_dim},
              {"latent_dim", latent_dim},
              {"flow", json{{"hidden", flow.hidden}, {"depth", flow.depth}, {"time_dim", flow.time_dim}, {"K", flow.steps}}}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  std::string bad;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
  }
  if (!bad.empty()) throw ValidationError(where + ": unknown keys: " + bad);
}

std::size_t size_field(const json& j, const char* key, std::size_t fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number_unsigned()) throw ValidationError(where + ": '" + key + "' must be a non-negative integer");
  return j.at(key).get<std::size_t>();
}

}  // namespace

BackboneConfig BackboneConfig::from_json(const json& j) {
  const std::string where = "backbone config";
  reject_unknown(j, {"width", "depth", "heads", "max_context", "semantic_dim", "latent_dim", "flow"}, where);
  BackboneConfig c;
  c.width = size_field(j, "width", c.width, where);
  c.depth = size_field(j, "depth", c.depth, where);
  c.heads = size_field(j, "heads", c.heads, where);
  c.max_context = size_field(j, "max_context", c.max_context, where);
  c.semantic_dim = size_field(j, "semantic_dim", 0, where);
  c.latent_dim = size_field(j, "latent_dim", 0, where);
  if (j.contains("flow")) {
    const json& f = j.at("flow");
    reject_unknown(f, {"hidden", "depth", "time_dim", "K"}, where + ".flow");
    c.flow.hidden = size_field(f, "hidden", c.flow.hidden, where + ".flow");
    c.flow.depth = size_field(f, "depth", c.flow.depth, where + ".flow");
    c.flow.time_dim = size_field(f, "time_dim", c.flow.time_dim, where + ".flow");
    c.flow.steps = size_field(f, "K", c.flow.steps, where + ".flow");
  }
  c.flow.cond_dim = c.width;
  c.flow.latent_dim = c.latent_dim;
  c.validate();
  return c;
}

BackboneConfig BackboneConfig::for_tokenizer(const tok::MingTokConfig& tokenizer) {
  BackboneConfig c;
  c.semantic_dim = tokenizer.semantic_dim();
  c.latent_dim = tokenizer.latent_dim;
  c.flow.cond_dim = c.width;
  c.flow.latent_dim = c.latent_dim;
  return c;
}

template <typename T>
Tensor<T> time_embedding(const std::vector<double>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> out(t.size() * dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double angle = 1000.0 * t[r] * freq;
      out[r * dim + i] = static_cast<T>(std::cos(angle));
      out[r * dim + half + i] = static_cast<T>(std::sin(angle));
    }
  }
  return Tensor<T>::from({t.size(), dim}, std::move(out));
}

template <typename T>
FlowHead<T>::FlowHead(const FlowHeadConfig& config, Rng& rng) : config_(config) {
  config.validate();
  in_ = vit::Linear<T>(config.latent_dim + config.time_dim + config.cond_dim, config.hidden, true, rng);
  vit::BlockConfig sizing;
  sizing.embed_dim = config.hidden;
  for (std::size_t i = 0; i < config.depth; ++i) {
    norms_.emplace_back(config.hidden);
    blocks_.emplace_back(config.hidden, sizing.ffn_hidden(), rng);
  }
  out_norm_ = vit::LayerNorm<T>(config.hidden);
  out_ = vit::Linear<T>(config.hidden, config.latent_dim, true, rng);
}

template <typename T>
Tensor<T> FlowHead<T>::velocity(const Tensor<T>& x, const std::vector<double>& t, const Tensor<T>& z) const {
  const std::size_t n = t.size();
  if (x.rank() != 2 || z.rank() != 2 || x.dim(0) != n || z.dim(0) != n || x.dim(1) != config_.latent_dim ||
      z.dim(1) != config_.cond_dim) {
    throw ValidationError("flow head: x " + shape_str(x.shape()) + ", z " + shape_str(z.shape()) + " for " +
                          std::to_string(n) + " times");
  }
  Tensor<T> h = in_.forward(concat<T>({x, time_embedding<T>(t, config_.time_dim), z}, 1));
  for (std::size_t i = 0; i < blocks_.size(); ++i) h = add(h, blocks_[i].forward(norms_[i].forward(h)));
  return out_.forward(out_norm_.forward(h));
}

template <typename T>
void FlowHead<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  in_.collect(out, prefix + ".in");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    norms_[i].collect(out, prefix + ".blocks." + std::to_string(i) + ".norm");
    blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i) + ".ffn");
  }
  out_norm_.collect(out, prefix + ".norm");
  out_.collect(out, prefix + ".out");
}

namespace {

template <typename T>
Tensor<T> as_rows(const Tensor<T>& x) {
  return x.rank() == 1 ? reshape(x, {1, x.numel()}) : x;
}

}  // namespace

template <typename T>
Tensor<T> flow_interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  return add(mul_scalar(x0, static_cast<T>(1.0 - t)), mul_scalar(x1, static_cast<T>(t)));
}

template <typename T>
Tensor<T> flow_loss_at(const FlowHead<T>& head, const Tensor<T>& z, const Tensor<T>& x1, const Tensor<T>& x0,
                       const std::vector<double>& t) {
  const Tensor<T> zr = as_rows(z), x1r = as_rows(x1), x0r = as_rows(x0);
  const std::size_t n = x1r.dim(0);
  if (x0r.shape() != x1r.shape() || t.size() != n) {
    throw ValidationError("flow loss: x0 " + shape_str(x0.shape()) + ", x1 " + shape_str(x1.shape()) + ", " +
                          std::to_string(t.size()) + " times");
  }
  Tensor<T> xt, target;
  {
    NoGradGuard guard;
    std::vector<T> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<T>(1.0 - t[i]);
      b[i] = static_cast<T>(t[i]);
    }
    xt = add(mul(x0r, Tensor<T>::from({n, 1}, a)), mul(x1r, Tensor<T>::from({n, 1}, b)));
    target = sub(x1r, x0r);
  }
  return mse_loss(head.velocity(xt, t, zr), target);
}

template <typename T>
Tensor<T> flow_train_loss(const FlowHead<T>& head, const Tensor<T>& z, const Tensor<T>& x1, Rng& rng) {
  const Tensor<T> x1r = as_rows(x1);
  const std::size_t n = x1r.dim(0);
  std::vector<double> t(n);
  for (auto& v : t) v = rng.uniform();
  const Tensor<T> x0 = Tensor<T>::from(x1r.shape(), rng.normal_vector<T>(x1r.numel()));
  return flow_loss_at(head, z, x1r, x0, t);
}

template <typename T>
Tensor<T> flow_integrate(const VelocityFn<T>& v, const Tensor<T>& x0, std::size_t steps) {
  if (steps < 1) throw ValidationError("flow sampler: K must be >= 1");
  NoGradGuard guard;
  Tensor<T> x = as_rows(x0);
  const T dt = static_cast<T>(1.0 / static_cast<double>(steps));
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps);
    x = add(x, mul_scalar(v(x, t), dt));
  }
  return reshape(x, {x.numel()});
}

template <typename T>
Tensor<T> flow_sample(const FlowHead<T>& head, const Tensor<T>& z, std::size_t steps, Rng& rng) {
  const std::size_t d = head.config().latent_dim;
  const Tensor<T> zr = as_rows(z);
  const Tensor<T> x0 = Tensor<T>::from({d}, rng.normal_vector<T>(d));
  VelocityFn<T> v = [&](const Tensor<T>& x, double t) { return head.velocity(x, {t}, zr); };
  return flow_integrate(v, x0, steps);
}

template <typename T>
UnifiedModel<T>::UnifiedModel(const BackboneConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config.validate();
  Rng rng(seed);
  text_table_ = vit::normal_param<T>(rng, {vocab::kSize, config.width}, 0.02);
  positions_ = vit::normal_param<T>(rng, {config.max_context, config.width}, 0.02);
  connector_in_ = vit::Linear<T>(config.semantic_dim, config.width, true, rng);
  connector_out_ = vit::Linear<T>(config.width, config.width, true, rng);
  vit::BlockConfig b;
  b.embed_dim = config.width;
  b.depth = config.depth;
  b.num_heads = config.heads;
  b.head_dim = config.width / config.heads;
  b.attention = vit::AttentionMode::Causal;
  backbone_ = vit::BlockStack<T>(b, rng);
  text_head_ = vit::Linear<T>(config.width, vocab::kSize, true, rng);
  flow_ = FlowHead<T>(config.flow, rng);
}

template <typename T>
Tensor<T> UnifiedModel<T>::connect(const Tensor<T>& semantic) const {
  return connector_out_.forward(gelu(connector_in_.forward(as_rows(semantic))));
}

template <typename T>
Tensor<T> UnifiedModel<T>::embed_items(const Sequence<T>& items, std::size_t start) const {
  const std::size_t n = items.size();
  if (n == 0) throw ValidationError("embed: empty sequence");
  if (start + n > config_.max_context) {
    throw ValidationError("context overflow: " + std::to_string(start + n) + " positions exceed max_context " +
                          std::to_string(config_.max_context));
  }
  // Gather text rows and visual rows separately, then scatter back in order.
  std::vector<std::size_t> text_ids, text_at, vis_at;
  std::vector<Tensor<T>> semantics;
  for (std::size_t i = 0; i < n; ++i) {
    if (items[i].is_text()) {
      text_ids.push_back(items[i].token);
      text_at.push_back(i);
    } else {
      if (!items[i].semantic.defined()) {
        throw ValidationError("embed: visual item at position " + std::to_string(start + i) +
                              " has no semantic expansion");
      }
      if (items[i].semantic.numel() != config_.semantic_dim) {
        throw ValidationError("embed: visual item semantic width " + std::to_string(items[i].semantic.numel()) +
                              " != " + std::to_string(config_.semantic_dim));
      }
      semantics.push_back(reshape(items[i].semantic, {1, config_.semantic_dim}));
      vis_at.push_back(i);
    }
  }
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> order(n);
  if (!text_ids.empty()) parts.push_back(index_rows(text_table_, text_ids));
  if (!semantics.empty()) parts.push_back(connect(concat(semantics, 0)));
  // Row r of the stacked parts belongs at sequence position order[r].
  std::size_t r = 0;
  for (std::size_t i : text_at) order[i] = r++;
  for (std::size_t i : vis_at) order[i] = r++;
  Tensor<T> stacked = parts.size() == 1 ? parts[0] : concat(parts, 0);
  return add(index_rows(stacked, order), slice(positions_, 0, start, start + n));
}

template <typename T>
Tensor<T> UnifiedModel<T>::backbone_forward(const Tensor<T>& embedded) const {
  return backbone_.forward(embedded);
}

template <typename T>
Tensor<T> UnifiedModel<T>::backbone_step(const Tensor<T>& embedded, Cache& cache) const {
  return backbone_.step(embedded, cache);
}

template <typename T>
Tensor<T> UnifiedModel<T>::text_logits(const Tensor<T>& hidden) const {
  return text_head_.forward(as_rows(hidden));
}

template <typename T>
std::size_t UnifiedModel<T>::text_step(const Tensor<T>& hidden_row, double temperature, Rng& rng) const {
  NoGradGuard guard;
  const Tensor<T> logits = text_logits(hidden_row);
  auto lv = logits.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < lv.size(); ++i) {
    if (lv[i] > lv[best]) best = i;
  }
  if (temperature <= 0.0) return best;
  std::vector<double> p(lv.size());
  double z = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    p[i] = std::exp((static_cast<double>(lv[i]) - lv[best]) / temperature);
    z += p[i];
  }
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0) return i;
  }
  return best;
}

template <typename T>
ParamList<T> UnifiedModel<T>::parameters() const {
  ParamList<T> out;
  out.push_back({"text.table", text_table_});
  out.push_back({"pos", positions_});
  connector_in_.collect(out, "connector.in");
  connector_out_.collect(out, "connector.out");
  backbone_.collect(out, "backbone");
  text_head_.collect(out, "head.text");
  flow_.collect(out, "head.flow");
  return out;
}

template <typename T>
void UnifiedModel<T>::save(const std::filesystem::path& path, const std::filesystem::path& tokenizer_checkpoint) const {
  write_container(path, to_arrays(parameters()));
  json meta{{"format", "mingtok-unified"},
            {"config", config_.to_json()},
            {"seed", seed_},
            {"rng", Rng::kAlgorithm},
            {"tokenizer", tokenizer_checkpoint.string()}};
  const auto side = tok::sidecar_path(path);
  std::ofstream os(side);
  if (!os) throw IoError("cannot write '" + side.string() + "'");
  os << meta.dump(2) << '\n';
}

template <typename T>
typename UnifiedModel<T>::Loaded UnifiedModel<T>::load(const std::filesystem::path& path) {
  const auto side = tok::sidecar_path(path);
  std::ifstream is(side);
  if (!is) throw IoError("cannot open '" + side.string() + "'");
  json meta;
  try {
    meta = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "mingtok-unified") throw IoError(side.string() + ": not a unified checkpoint");
  Loaded out;
  out.model = std::make_unique<UnifiedModel<T>>(BackboneConfig::from_json(meta.at("config")),
                                                meta.value("seed", std::uint64_t{0}));
  load_arrays(out.model->parameters(), read_container(path));
  std::filesystem::path tokenizer = meta.value("tokenizer", "");
  if (tokenizer.is_relative()) tokenizer = side.parent_path() / tokenizer;
  out.tokenizer_checkpoint = tokenizer;
  return out;
}

template <typename T>
GeneratedImage<T> generate_image(const UnifiedModel<T>& model, const tok::MingTok<T>& tokenizer,
                                 const Sequence<T>& prefix, std::size_t steps, Rng& rng, GenerationMode mode) {
  const auto& tc = tokenizer.config();
  const std::size_t total = tc.tokens();
  if (prefix.empty() || !prefix.back().is_text() || prefix.back().token != vocab::kBOI) {
    throw ValidationError("generate_image: prefix must end with BOI");
  }
  if (model.config().latent_dim != tc.latent_dim || model.config().semantic_dim != tc.semantic_dim()) {
    throw ValidationError("generate_image: backbone and tokenizer widths disagree");
  }
  const std::size_t needed = prefix.size() + total + 1;
  if (needed > model.config().max_context) {
    throw ValidationError("context overflow: " + std::to_string(needed) + " positions needed (prefix " +
                          std::to_string(prefix.size()) + " + " + std::to_string(total) + " image tokens + EOI), " +
                          "max_context is " + std::to_string(model.config().max_context) +
                          "; truncate earlier rounds or raise max_context");
  }
  NoGradGuard guard;
  std::vector<Tensor<T>> latents, semantics;
  latents.reserve(total);
  semantics.reserve(total);

  if (mode == GenerationMode::Incremental) {
    auto cache = model.empty_cache();
    Tensor<T> hidden = model.backbone_step(model.embed_items(prefix, 0), cache);
    auto state = tokenizer.begin_expand();
    for (std::size_t t = 0; t < total; ++t) {
      const Tensor<T> z = slice(hidden, 0, hidden.dim(0) - 1, hidden.dim(0));
      Tensor<T> x = flow_sample(model.flow(), z, steps, rng);
      Tensor<T> s = tokenizer.expand_step(state, x);
      latents.push_back(reshape(x, {1, tc.latent_dim}));
      semantics.push_back(reshape(s, {1, tc.semantic_dim()}));
      if (t + 1 < total) {
        hidden = model.backbone_step(model.embed_items({SequenceItem<T>::visual(x, s)}, prefix.size() + t), cache);
      }
    }
  } else {
    Sequence<T> items = prefix;
    for (std::size_t t = 0; t < total; ++t) {
      const Tensor<T> hidden = model.backbone_forward(model.embed_items(items, 0));
      const Tensor<T> z = slice(hidden, 0, hidden.dim(0) - 1, hidden.dim(0));
      Tensor<T> x = flow_sample(model.flow(), z, steps, rng);
      latents.push_back(reshape(x, {1, tc.latent_dim}));
      const Tensor<T> expanded = tokenizer.expand_prefix(concat(latents, 0));
      const Tensor<T> s = slice(expanded, 0, t, t + 1);
      semantics.push_back(s);
      items.push_back(SequenceItem<T>::visual(x, reshape(s, {tc.semantic_dim()})));
    }
  }
  GeneratedImage<T> out;
  out.latents = {tc.grid(), tc.grid(), concat(latents, 0)};
  out.semantics = {tc.grid(), tc.grid(), concat(semantics, 0)};
  return out;
}

template <typename T>
JointLoss<T> joint_loss(const UnifiedModel<T>& model, const std::vector<Sequence<T>>& batch, Rng& rng,
                        JointWeights weights) {
  std::vector<Tensor<T>> text_hidden, flow_cond, flow_target;
  std::vector<std::size_t> targets;
  for (const auto& seq : batch) {
    if (seq.size() < 2) continue;
    const Tensor<T> hidden = model.backbone_forward(model.embed_sequence(seq));
    std::vector<std::size_t> text_rows, vis_rows;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const auto& next = seq[i + 1];
      if (next.is_text()) {
        text_rows.push_back(i);
        targets.push_back(next.token);
      } else {
        vis_rows.push_back(i);
        flow_target.push_back(reshape(next.latent, {1, next.latent.numel()}));
      }
    }
    if (!text_rows.empty()) text_hidden.push_back(index_rows(hidden, text_rows));
    if (!vis_rows.empty()) flow_cond.push_back(index_rows(hidden, vis_rows));
  }
  JointLoss<T> out;
  out.text_slots = targets.size();
  out.visual_slots = flow_target.size();
  if (!targets.empty()) out.text = cross_entropy(model.text_logits(concat(text_hidden, 0)), targets);
  if (!flow_target.empty()) {
    out.flow = flow_train_loss(model.flow(), concat(flow_cond, 0), concat(flow_target, 0), rng);
  }
  if (out.text.defined() && out.flow.defined()) {
    out.total = add(mul_scalar(out.text, static_cast<T>(weights.text)), mul_scalar(out.flow, static_cast<T>(weights.flow)));
  } else if (out.text.defined()) {
    out.total = mul_scalar(out.text, static_cast<T>(weights.text));
  } else if (out.flow.defined()) {
    out.total = mul_scalar(out.flow, static_cast<T>(weights.flow));
  } else {
    throw ValidationError("joint_loss: batch has no prediction targets");
  }
  return out;
}

#define MINGTOK_INSTANTIATE_AR(T)                                                                               \
  template struct SequenceItem<T>;                                                                              \
  template Tensor<T> time_embedding<T>(const std::vector<double>&, std::size_t);                                \
  template class FlowHead<T>;                                                                                   \
  template Tensor<T> flow_interpolate(const Tensor<T>&, const Tensor<T>&, double);                              \
  template Tensor<T> flow_loss_at(const FlowHead<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                  const std::vector<double>&);                                                  \
  template Tensor<T> flow_train_loss(const FlowHead<T>&, const Tensor<T>&, const Tensor<T>&, Rng&);             \
  template Tensor<T> flow_integrate(const VelocityFn<T>&, const Tensor<T>&, std::size_t);                       \
  template Tensor<T> flow_sample(const FlowHead<T>&, const Tensor<T>&, std::size_t, Rng&);                      \
  template class UnifiedModel<T>;                                                                               \
  template GeneratedImage<T> generate_image(const UnifiedModel<T>&, const tok::MingTok<T>&, const Sequence<T>&, \
                                            std::size_t, Rng&, GenerationMode);                                 \
  template JointLoss<T> joint_loss(const UnifiedModel<T>&, const std::vector<Sequence<T>>&, Rng&, JointWeights);

MINGTOK_INSTANTIATE_AR(float)
MINGTOK_INSTANTIATE_AR(double)

}  // namespace mingtok::ar
