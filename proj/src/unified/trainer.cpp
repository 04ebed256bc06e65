#include "unified/trainer.hpp"

#include <ostream>
#include <set>

#include "numerics/adam.hpp"

namespace mingtok::ar {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  std::string bad;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
  }
  if (!bad.empty()) throw ValidationError(where + ": unknown keys: " + bad);
}

template <typename V>
V field(const json& j, const char* key, V fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError(where + ": '" + key + "' has the wrong type");
  }
}

template <typename T>
void push_image(Sequence<T>& seq, const tok::LatentSeq<T>& latents, const tok::SemanticSeq<T>& semantics) {
  nn::NoGradGuard guard;
  seq.push_back(SequenceItem<T>::text(vocab::kBOI));
  const std::size_t ld = latents.tokens.dim(1), sd = semantics.tokens.dim(1);
  for (std::size_t i = 0; i < latents.count(); ++i) {
    seq.push_back(SequenceItem<T>::visual(nn::reshape(nn::slice(latents.tokens, 0, i, i + 1), {ld}),
                                          nn::reshape(nn::slice(semantics.tokens, 0, i, i + 1), {sd})));
  }
  seq.push_back(SequenceItem<T>::text(vocab::kEOI));
}

template <typename T>
void push_text(Sequence<T>& seq, const std::string& text) {
  for (std::size_t id : vocab::encode_bytes(text)) seq.push_back(SequenceItem<T>::text(id));
}

}  // namespace

UnifiedTrainConfig UnifiedTrainConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  const std::string where = "unified training config";
  reject_unknown(j,
                 {"tokenizer", "backbone", "steps", "batch", "lr", "seed", "weights", "mix", "mixed_resolution", "data"},
                 where);
  UnifiedTrainConfig c;
  c.tokenizer = field<std::string>(j, "tokenizer", "", where);
  if (c.tokenizer.empty()) throw ValidationError(where + ": 'tokenizer' checkpoint path is required");
  if (std::filesystem::path(c.tokenizer).is_relative() && !base_dir.empty()) {
    c.tokenizer = (base_dir / c.tokenizer).string();
  }
  if (j.contains("backbone")) {
    c.backbone = j.at("backbone");
    reject_unknown(c.backbone, {"width", "depth", "heads", "max_context", "flow"}, where + ".backbone");
  }
  c.steps = field<std::size_t>(j, "steps", c.steps, where);
  c.batch = field<std::size_t>(j, "batch", c.batch, where);
  c.lr = field<double>(j, "lr", c.lr, where);
  c.seed = field<std::uint64_t>(j, "seed", c.seed, where);
  c.mixed_resolution = field<bool>(j, "mixed_resolution", false, where);
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    reject_unknown(w, {"text", "flow"}, where + ".weights");
    c.weights.text = field<double>(w, "text", c.weights.text, where + ".weights");
    c.weights.flow = field<double>(w, "flow", c.weights.flow, where + ".weights");
  }
  if (j.contains("mix")) {
    const json& m = j.at("mix");
    reject_unknown(m, {"generation", "understanding"}, where + ".mix");
    c.mix.generation = field<double>(m, "generation", c.mix.generation, where + ".mix");
    c.mix.understanding = field<double>(m, "understanding", c.mix.understanding, where + ".mix");
  }
  if (c.mix.generation < 0 || c.mix.understanding < 0 || c.mix.generation + c.mix.understanding <= 0) {
    throw ValidationError(where + ".mix: ratios must be non-negative with a positive sum");
  }
  if (c.mixed_resolution) throw ValidationError(where + ": mixed_resolution training is not supported");
  c.data = j.contains("data") ? mim::data_from_json(j.at("data"), base_dir) : mim::DataConfig{};
  if (c.steps == 0 || c.batch == 0) throw ValidationError(where + ": steps and batch must be positive");
  if (!(c.lr > 0)) throw ValidationError(where + ": lr must be positive");
  return c;
}

json UnifiedTrainConfig::to_json() const {
  return json{{"tokenizer", tokenizer},
              {"backbone", backbone},
              {"steps", steps},
              {"batch", batch},
              {"lr", lr},
              {"seed", seed},
              {"weights", json{{"text", weights.text}, {"flow", weights.flow}}},
              {"mix", json{{"generation", mix.generation}, {"understanding", mix.understanding}}},
              {"mixed_resolution", mixed_resolution},
              {"data", mim::data_to_json(data)}};
}

template <typename T>
Sequence<T> generation_sequence(const std::string& caption, const tok::LatentSeq<T>& latents,
                                const tok::SemanticSeq<T>& semantics) {
  Sequence<T> seq{SequenceItem<T>::text(vocab::kBOS)};
  push_text(seq, caption);
  push_image(seq, latents, semantics);
  seq.push_back(SequenceItem<T>::text(vocab::kEOS));
  return seq;
}

template <typename T>
Sequence<T> understanding_sequence(const std::string& caption, const tok::LatentSeq<T>& latents,
                                   const tok::SemanticSeq<T>& semantics) {
  Sequence<T> seq{SequenceItem<T>::text(vocab::kBOS)};
  push_image(seq, latents, semantics);
  push_text(seq, caption);
  seq.push_back(SequenceItem<T>::text(vocab::kEOS));
  return seq;
}

template Sequence<float> generation_sequence(const std::string&, const tok::LatentSeq<float>&,
                                             const tok::SemanticSeq<float>&);
template Sequence<double> generation_sequence(const std::string&, const tok::LatentSeq<double>&,
                                              const tok::SemanticSeq<double>&);
template Sequence<float> understanding_sequence(const std::string&, const tok::LatentSeq<float>&,
                                                const tok::SemanticSeq<float>&);
template Sequence<double> understanding_sequence(const std::string&, const tok::LatentSeq<double>&,
                                                 const tok::SemanticSeq<double>&);

json UnifiedStepReport::to_json() const {
  return json{{"step", step}, {"l_text", text}, {"l_flow", flow}, {"total", total}};
}

std::unique_ptr<UnifiedModel<float>> train_unified(const UnifiedTrainConfig& config,
                                                   const tok::MingTok<float>& tokenizer, std::ostream* metrics,
                                                   const std::function<void(const UnifiedStepReport&)>& progress) {
  const auto& tc = tokenizer.config();
  json bj = config.backbone;
  bj["semantic_dim"] = tc.semantic_dim();
  bj["latent_dim"] = tc.latent_dim;
  const BackboneConfig bc = BackboneConfig::from_json(bj);
  const io::ImageSet data = mim::load_data(config.data, tc.resolution, config.seed);

  std::vector<tok::LatentSeq<float>> latents;
  std::vector<tok::SemanticSeq<float>> semantics;
  {
    nn::NoGradGuard guard;
    for (const auto& im : data.images) {
      latents.push_back(tokenizer.encode(im));
      semantics.push_back(tokenizer.expand(latents.back()));
    }
  }
  for (std::size_t i = 0; i < data.keys.size(); ++i) {
    const std::size_t len = 2 + vocab::encode_bytes(data.keys[i]).size() + tc.tokens() + 2;
    if (len > bc.max_context) {
      throw ValidationError("unified training: sequence for '" + data.keys[i] + "' needs " + std::to_string(len) +
                            " positions, max_context is " + std::to_string(bc.max_context));
    }
  }

  auto model = std::make_unique<UnifiedModel<float>>(bc, config.seed);
  nn::Adam<float> optimizer(nn::tensors_of(model->parameters()), nn::AdamConfig{config.lr});
  nn::Rng rng(config.seed + 1);
  const double p_gen = config.mix.generation / (config.mix.generation + config.mix.understanding);
  const std::size_t n = data.images.size();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<Sequence<float>> batch;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t k = ((step - 1) * config.batch + b) % n;
      batch.push_back(rng.uniform() < p_gen ? generation_sequence(data.keys[k], latents[k], semantics[k])
                                            : understanding_sequence(data.keys[k], latents[k], semantics[k]));
    }
    optimizer.zero_grad();
    JointLoss<float> loss = joint_loss(*model, batch, rng, config.weights);
    if (!nn::all_finite(loss.total)) {
      throw NumericError("unified training: non-finite loss at step " + std::to_string(step));
    }
    loss.total.backward();
    optimizer.step();
    UnifiedStepReport r;
    r.step = step;
    r.text = loss.text.defined() ? loss.text.item() : 0.0;
    r.flow = loss.flow.defined() ? loss.flow.item() : 0.0;
    r.total = loss.total.item();
    if (metrics) *metrics << r.to_json().dump() << '\n';
    if (progress) progress(r);
  }
  return model;
}

}  // namespace mingtok::ar
