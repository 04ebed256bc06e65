#include "training/mim.hpp"

#include <cmath>
#include <numeric>

#include "numerics/container.hpp"

namespace mingtok::mim {

using namespace mingtok::nn;
using json = nlohmann::json;

MaskPlan sample_mask(std::size_t total, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ValidationError("sample_mask: ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
  MaskPlan plan;
  plan.total = total;
  plan.ratio = ratio;
  plan.masked.assign(total, false);
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(order[i], order[j]);
    plan.masked[order[i]] = true;
  }
  return plan;
}

template <typename T>
FrozenTeacher<T>::FrozenTeacher(std::size_t resolution, std::size_t patch, std::size_t dim, std::size_t depth,
                                std::uint64_t seed)
    : dim_(dim) {
  Rng rng(seed);
  vit::BlockConfig cfg;
  cfg.embed_dim = dim;
  cfg.depth = depth;
  cfg.num_heads = dim % 2 == 0 ? 2 : 1;
  cfg.head_dim = dim / cfg.num_heads;
  cfg.attention = vit::AttentionMode::Full;
  patch_ = vit::PatchEmbed<T>(resolution, patch, dim, rng, 1.0 / std::sqrt(double(patch * patch * 3)));
  blocks_ = vit::BlockStack<T>(cfg, rng);
  for (auto& p : parameters()) Tensor<T>(p.tensor).set_requires_grad(false);
}

template <typename T>
Tensor<T> FrozenTeacher<T>::features(const Tensor<T>& image, const std::string&) const {
  NoGradGuard guard;
  return blocks_.forward(patch_.forward(image).tokens);
}

template <typename T>
ParamList<T> FrozenTeacher<T>::parameters() const {
  ParamList<T> out;
  patch_.collect(out, "teacher.patch");
  blocks_.collect(out, "teacher");
  return out;
}

template <typename T>
FileTeacher<T>::FileTeacher(std::filesystem::path dir, std::string entry, std::size_t dim)
    : dir_(std::move(dir)), entry_(std::move(entry)), dim_(dim) {}

template <typename T>
Tensor<T> FileTeacher<T>::features(const Tensor<T>&, const std::string& key) const {
  const auto path = dir_ / (key + ".mtok");
  if (!std::filesystem::exists(path)) {
    throw IoError("teacher features for key '" + key + "' not found at " + path.string());
  }
  const auto entries = read_container(path);
  const NamedArray& a = find_entry(entries, entry_);
  if (a.shape.size() != 2 || a.shape[1] != dim_) {
    throw ValidationError("teacher features '" + key + "': entry '" + entry_ + "' has shape " + shape_str(a.shape) +
                          ", expected [T," + std::to_string(dim_) + "]");
  }
  return from_array<T>(a);
}

void write_teacher_file(const std::filesystem::path& dir, const std::string& key, const Tensor<float>& structural,
                        const Tensor<float>& semantic) {
  std::filesystem::create_directories(dir);
  write_container(dir / (key + ".mtok"), {to_array("struct", structural), to_array("sem", semantic)});
}

std::size_t teacher_file_dim(const std::filesystem::path& dir, const std::string& key, const std::string& entry) {
  const auto path = dir / (key + ".mtok");
  if (!std::filesystem::exists(path)) {
    throw IoError("teacher features for key '" + key + "' not found at " + path.string());
  }
  const auto entries = read_container(path);
  const NamedArray& a = find_entry(entries, entry);
  if (a.shape.size() != 2) throw ValidationError("teacher features '" + key + "': entry '" + entry + "' is not 2-D");
  return a.shape[1];
}

double LossReport::combine(const LossWeights& w, double lat, double sem, double pm, double pu) {
  return w.lat * lat + w.sem * sem + w.pix * (pm + pu);
}

json LossReport::to_json(std::uint64_t step) const {
  return json{{"step", step},
              {"l_latent", l_latent},
              {"l_semantic", l_semantic},
              {"l_pixel_masked", l_pixel_masked},
              {"l_pixel_unmasked", l_pixel_unmasked},
              {"total", total}};
}

template <typename T>
PredictionHeads<T>::PredictionHeads(std::size_t latent_dim, std::size_t struct_dim, std::size_t semantic_dim,
                                    std::size_t sem_dim, Rng& rng)
    : structural(latent_dim, struct_dim, true, rng), semantic(semantic_dim, sem_dim, true, rng) {}

template <typename T>
ParamList<T> PredictionHeads<T>::parameters() const {
  ParamList<T> out;
  structural.collect(out, "head.struct");
  semantic.collect(out, "head.sem");
  return out;
}

template <typename T>
Tensor<T> feature_loss(const Tensor<T>& pred, const vit::Linear<T>& head, const Tensor<T>& teacher,
                       const MaskPlan& plan) {
  if (pred.rank() != 2 || teacher.rank() != 2 || pred.dim(0) != teacher.dim(0) || plan.masked.size() != pred.dim(0)) {
    throw ValidationError("feature_loss: prediction " + shape_str(pred.shape()) + ", teacher " +
                          shape_str(teacher.shape()) + " and a " + std::to_string(plan.masked.size()) +
                          "-token plan disagree");
  }
  if (head.out_features() != teacher.dim(1)) {
    throw ValidationError("feature_loss: head width " + std::to_string(head.out_features()) + " != teacher width " +
                          std::to_string(teacher.dim(1)));
  }
  const auto rows = plan.masked_positions();
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> target;
  {
    NoGradGuard guard;
    target = l2_normalize(index_rows(teacher, rows));
  }
  return mse_loss(head.forward(index_rows(pred, rows)), target);
}

template <typename T>
LossTerms<T> compute_losses(const MingTok<T>& model, const PredictionHeads<T>& heads, const Tensor<T>& image,
                            const MaskPlan& plan, const Tensor<T>& struct_features, const Tensor<T>& sem_features,
                            const LossWeights& weights) {
  LossTerms<T> out;
  {
    auto latents = model.encode(image, &plan);
    auto semantics = model.expand(latents);
    auto recon = model.decode_pixels(semantics);
    out.l_latent = feature_loss(latents.tokens, heads.structural, struct_features, plan);
    out.l_semantic = feature_loss(semantics.tokens, heads.semantic, sem_features, plan);
    out.l_pixel_masked = l1_loss(recon, image);
  }
  out.l_pixel_unmasked = l1_loss(model.reconstruct(image), image);
  out.total = add(add(mul_scalar(out.l_latent, static_cast<T>(weights.lat)),
                      mul_scalar(out.l_semantic, static_cast<T>(weights.sem))),
                  mul_scalar(add(out.l_pixel_masked, out.l_pixel_unmasked), static_cast<T>(weights.pix)));
  return out;
}

template <typename T>
MimTrainer<T>::MimTrainer(MingTok<T>& model, TeacherBundle<T> teachers, TrainOptions options)
    : model_(model),
      teachers_(std::move(teachers)),
      options_(options),
      rng_(options.seed),
      heads_(model.config().latent_dim, teachers_.structural->dim(), model.config().semantic_dim(),
             teachers_.semantic->dim(), rng_),
      optimizer_([&] {
        auto params = tensors_of(model.parameters());
        for (auto& p : heads_.parameters()) params.push_back(p.tensor);
        return params;
      }(),
                 AdamConfig{options.lr}) {
  if (!(options.mask_ratio >= 0.0 && options.mask_ratio <= 1.0)) {
    throw ValidationError("mim trainer: mask_ratio must lie in [0, 1]");
  }
}

template <typename T>
const std::pair<Tensor<T>, Tensor<T>>& MimTrainer<T>::teacher_targets(const Tensor<T>& image, const std::string& key) {
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  Tensor<T> s = teachers_.structural->features(image, key);
  Tensor<T> m = teachers_.semantic->features(image, key);
  const std::size_t n = model_.config().tokens();
  if (s.dim(0) != n || m.dim(0) != n) {
    throw ValidationError("teacher features for '" + key + "' have " + std::to_string(s.dim(0)) + "/" +
                          std::to_string(m.dim(0)) + " tokens, tokenizer grid has " + std::to_string(n));
  }
  return cache_.emplace(key, std::make_pair(s, m)).first->second;
}

template <typename T>
LossReport MimTrainer<T>::train_step(std::span<const Tensor<T>> images, std::span<const std::string> keys) {
  if (images.empty() || images.size() != keys.size()) {
    throw ValidationError("train_step: need one key per image and at least one image");
  }
  optimizer_.zero_grad();
  const T inv = static_cast<T>(1.0 / static_cast<double>(images.size()));
  LossReport report;
  report.weights = options_.weights;
  Tensor<T> objective;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& [sf, mf] = teacher_targets(images[i], keys[i]);
    const MaskPlan plan = sample_mask(model_.config().tokens(), options_.mask_ratio, rng_);
    LossTerms<T> terms = compute_losses(model_, heads_, images[i], plan, sf, mf, options_.weights);
    if (!std::isfinite(static_cast<double>(terms.total.item()))) {
      const std::string bad = first_non_finite(terms.total);
      throw NumericError("train_step: non-finite loss; first non-finite tensor: " + (bad.empty() ? "total" : bad));
    }
    report.l_latent += terms.l_latent.item() / double(images.size());
    report.l_semantic += terms.l_semantic.item() / double(images.size());
    report.l_pixel_masked += terms.l_pixel_masked.item() / double(images.size());
    report.l_pixel_unmasked += terms.l_pixel_unmasked.item() / double(images.size());
    Tensor<T> scaled = mul_scalar(terms.total, inv);
    objective = objective.defined() ? add(objective, scaled) : scaled;
  }
  report.total = LossReport::combine(report.weights, report.l_latent, report.l_semantic, report.l_pixel_masked,
                                     report.l_pixel_unmasked);
  objective.backward();
  optimizer_.step();
  return report;
}

template <typename T>
LossReport MimTrainer<T>::train_step(const Tensor<T>& image, const std::string& key) {
  return train_step(std::span<const Tensor<T>>(&image, 1), std::span<const std::string>(&key, 1));
}

#define MINGTOK_INSTANTIATE_MIM(T)                                                                              \
  template class FrozenTeacher<T>;                                                                              \
  template class FileTeacher<T>;                                                                                \
  template struct PredictionHeads<T>;                                                                           \
  template Tensor<T> feature_loss(const Tensor<T>&, const vit::Linear<T>&, const Tensor<T>&, const MaskPlan&); \
  template LossTerms<T> compute_losses(const MingTok<T>&, const PredictionHeads<T>&, const Tensor<T>&,          \
                                       const MaskPlan&, const Tensor<T>&, const Tensor<T>&, const LossWeights&); \
  template class MimTrainer<T>;

MINGTOK_INSTANTIATE_MIM(float)
MINGTOK_INSTANTIATE_MIM(double)

}  // namespace mingtok::mim
