#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>

#include "training/runner.hpp"
#include "unified/backbone.hpp"

namespace mingtok::ar {

// Task mix for sampled training sequences. Only the relative sizes matter.
struct TaskMix {
  double generation = 1.0;     // caption BOI image EOI
  double understanding = 1.0;  // BOI image EOI caption
};

struct UnifiedTrainConfig {
  std::string tokenizer;  // tokenizer checkpoint path
  nlohmann::json backbone = nlohmann::json::object();
  std::size_t steps = 100;
  std::size_t batch = 2;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  JointWeights weights;
  TaskMix mix;
  bool mixed_resolution = false;  // accepted, not implemented
  mim::DataConfig data;

  static UnifiedTrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

// BOS caption BOI visuals EOI EOS
template <typename T>
Sequence<T> generation_sequence(const std::string& caption, const tok::LatentSeq<T>& latents,
                                const tok::SemanticSeq<T>& semantics);
// BOS BOI visuals EOI caption EOS
template <typename T>
Sequence<T> understanding_sequence(const std::string& caption, const tok::LatentSeq<T>& latents,
                                   const tok::SemanticSeq<T>& semantics);

struct UnifiedStepReport {
  std::size_t step = 0;
  double text = 0;
  double flow = 0;
  double total = 0;
  nlohmann::json to_json() const;
};

// Trains backbone, connector and heads over a frozen tokenizer. Image
// captions are the data keys. Writes one metrics record per step.
std::unique_ptr<UnifiedModel<float>> train_unified(
    const UnifiedTrainConfig& config, const tok::MingTok<float>& tokenizer, std::ostream* metrics,
    const std::function<void(const UnifiedStepReport&)>& progress = {});

}  // namespace mingtok::ar
