#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "numerics/adam.hpp"
#include "tokenizer/mingtok.hpp"

namespace mingtok::mim {

using nn::Rng;
using nn::Tensor;
using tok::MaskPlan;
using tok::MingTok;

// Exactly round(ratio * total) positions, uniform without replacement.
MaskPlan sample_mask(std::size_t total, double ratio, Rng& rng);

// Frozen per-token feature provider on the tokenizer's grid.
template <typename T>
class TeacherSource {
 public:
  virtual ~TeacherSource() = default;
  virtual std::size_t dim() const = 0;
  // key identifies the image for file-backed teachers.
  virtual Tensor<T> features(const Tensor<T>& image, const std::string& key) const = 0;
};

// Seeded, randomly initialised full-attention ViT. Never trained.
template <typename T>
class FrozenTeacher : public TeacherSource<T> {
 public:
  FrozenTeacher(std::size_t resolution, std::size_t patch, std::size_t dim, std::size_t depth, std::uint64_t seed);

  std::size_t dim() const override { return dim_; }
  Tensor<T> features(const Tensor<T>& image, const std::string& key) const override;
  nn::ParamList<T> parameters() const;

 private:
  std::size_t dim_;
  vit::PatchEmbed<T> patch_;
  vit::BlockStack<T> blocks_;
};

// Reads <dir>/<key>.mtok and returns the entry named `entry` ([T, dim]).
template <typename T>
class FileTeacher : public TeacherSource<T> {
 public:
  FileTeacher(std::filesystem::path dir, std::string entry, std::size_t dim);

  std::size_t dim() const override { return dim_; }
  Tensor<T> features(const Tensor<T>& image, const std::string& key) const override;

 private:
  std::filesystem::path dir_;
  std::string entry_;
  std::size_t dim_;
};

// Writes one teacher feature file holding "struct" and "sem" entries.
void write_teacher_file(const std::filesystem::path& dir, const std::string& key, const Tensor<float>& structural,
                        const Tensor<float>& semantic);
// Feature width stored for `entry` in <dir>/<key>.mtok.
std::size_t teacher_file_dim(const std::filesystem::path& dir, const std::string& key, const std::string& entry);

template <typename T>
struct TeacherBundle {
  std::shared_ptr<const TeacherSource<T>> structural;
  std::shared_ptr<const TeacherSource<T>> semantic;
};

struct LossWeights {
  double lat = 1.0;
  double sem = 1.0;
  double pix = 1.0;
};

struct LossReport {
  double l_latent = 0;
  double l_semantic = 0;
  double l_pixel_masked = 0;
  double l_pixel_unmasked = 0;
  double total = 0;
  LossWeights weights;

  // total recomputed from the components.
  static double combine(const LossWeights& w, double lat, double sem, double pm, double pu);
  nlohmann::json to_json(std::uint64_t step) const;
};

// Training-only linear heads mapping latents and semantic tokens to teacher
// feature widths. Not part of inference checkpoints.
template <typename T>
struct PredictionHeads {
  PredictionHeads(std::size_t latent_dim, std::size_t struct_dim, std::size_t semantic_dim, std::size_t sem_dim,
                  Rng& rng);
  nn::ParamList<T> parameters() const;

  vit::Linear<T> structural;
  vit::Linear<T> semantic;
};

// MSE between head(pred) and L2-normalised teacher rows, over masked rows only.
// Zero (a constant) when nothing is masked.
template <typename T>
Tensor<T> feature_loss(const Tensor<T>& pred, const vit::Linear<T>& head, const Tensor<T>& teacher,
                       const MaskPlan& plan);

template <typename T>
struct LossTerms {
  Tensor<T> l_latent;
  Tensor<T> l_semantic;
  Tensor<T> l_pixel_masked;
  Tensor<T> l_pixel_unmasked;
  Tensor<T> total;
};

// Both passes of one training example as a differentiable graph.
// Pass A: encode with the plan -> expand -> decode; feature losses on masked
// rows plus full-image L1. Pass B: same without a mask, full-image L1.
template <typename T>
LossTerms<T> compute_losses(const MingTok<T>& model, const PredictionHeads<T>& heads, const Tensor<T>& image,
                            const MaskPlan& plan, const Tensor<T>& struct_features, const Tensor<T>& sem_features,
                            const LossWeights& weights);

struct TrainOptions {
  double lr = 1e-3;
  double mask_ratio = 0.4;
  LossWeights weights;
  std::uint64_t seed = 0;
};

// Owns the optimizer over tokenizer + prediction heads. Teachers are frozen.
template <typename T>
class MimTrainer {
 public:
  MimTrainer(MingTok<T>& model, TeacherBundle<T> teachers, TrainOptions options);

  // One optimizer step on the mean loss over the batch. keys name the images
  // for file-backed teachers (and the teacher-feature cache).
  LossReport train_step(std::span<const Tensor<T>> images, std::span<const std::string> keys);
  LossReport train_step(const Tensor<T>& image, const std::string& key = "image");

  const PredictionHeads<T>& heads() const { return heads_; }
  const nn::Adam<T>& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const TrainOptions& options() const { return options_; }

 private:
  const std::pair<Tensor<T>, Tensor<T>>& teacher_targets(const Tensor<T>& image, const std::string& key);

  MingTok<T>& model_;
  TeacherBundle<T> teachers_;
  TrainOptions options_;
  Rng rng_;
  PredictionHeads<T> heads_;
  nn::Adam<T> optimizer_;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> cache_;
};

}  // namespace mingtok::mim
