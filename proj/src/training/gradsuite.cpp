#include "training/gradsuite.hpp"

#include <functional>

#include "numerics/gradcheck.hpp"
#include "training/mim.hpp"
#include "unified/backbone.hpp"

namespace mingtok::mim {

using nn::ParamList;
using nn::Rng;
using nn::Tensor;

namespace {

template <typename T>
Tensor<T> leaf(Rng& rng, nn::Shape shape, double scale = 1.0, double offset = 0.0) {
  std::vector<T> v = rng.normal_vector<T>(nn::shape_numel(shape), scale);
  for (auto& x : v) x = static_cast<T>(x + offset);
  return Tensor<T>::parameter(shape, std::move(v));
}

// Scalar probe of an op output: sum(out * W) with a fixed random W.
template <typename T>
Tensor<T> probe(const Tensor<T>& out, std::uint64_t seed) {
  if (out.rank() == 0) return out;
  Rng rng(seed);
  return nn::sum_all(nn::mul(out, Tensor<T>::from(out.shape(), rng.normal_vector<T>(out.numel()))));
}

template <typename T>
struct Case {
  std::string name;
  std::function<Tensor<T>()> f;
  ParamList<T> params;
  std::size_t max_coords = 0;
};

template <typename T>
std::vector<Case<T>> op_cases() {
  std::vector<Case<T>> cs;
  Rng rng(1234);
  auto add_case = [&](std::string name, std::vector<Tensor<T>> xs, std::function<Tensor<T>(const std::vector<Tensor<T>>&)> g) {
    ParamList<T> ps;
    for (std::size_t i = 0; i < xs.size(); ++i) ps.push_back({"in" + std::to_string(i), xs[i]});
    const std::uint64_t seed = cs.size() + 1;
    cs.push_back({name, [xs, g, seed] { return probe(g(xs), seed); }, ps});
  };
  using V = std::vector<Tensor<T>>;
  add_case("matmul", {leaf<T>(rng, {3, 4}), leaf<T>(rng, {4, 5})}, [](const V& x) { return nn::matmul(x[0], x[1]); });
  add_case("matmul_batched", {leaf<T>(rng, {2, 3, 4}), leaf<T>(rng, {2, 4, 3})},
           [](const V& x) { return nn::matmul(x[0], x[1]); });
  add_case("add", {leaf<T>(rng, {3, 4}), leaf<T>(rng, {1, 4})}, [](const V& x) { return nn::add(x[0], x[1]); });
  add_case("sub", {leaf<T>(rng, {3, 4}), leaf<T>(rng, {3, 1})}, [](const V& x) { return nn::sub(x[0], x[1]); });
  add_case("mul", {leaf<T>(rng, {3, 4}), leaf<T>(rng, {4})}, [](const V& x) { return nn::mul(x[0], x[1]); });
  add_case("add_scalar", {leaf<T>(rng, {5})}, [](const V& x) { return nn::add_scalar(x[0], T(0.7)); });
  add_case("mul_scalar", {leaf<T>(rng, {5})}, [](const V& x) { return nn::mul_scalar(x[0], T(-1.3)); });
  add_case("transpose", {leaf<T>(rng, {2, 3, 4})}, [](const V& x) { return nn::transpose(x[0], 0, 2); });
  add_case("permute", {leaf<T>(rng, {2, 3, 2, 2})},
           [](const V& x) { return nn::permute(x[0], std::vector<std::size_t>{0, 2, 1, 3}); });
  add_case("reshape", {leaf<T>(rng, {2, 6})}, [](const V& x) { return nn::reshape(x[0], {3, 4}); });
  add_case("slice", {leaf<T>(rng, {4, 5})}, [](const V& x) { return nn::slice(x[0], 1, 1, 4); });
  add_case("concat", {leaf<T>(rng, {2, 3}), leaf<T>(rng, {2, 2})},
           [](const V& x) { return nn::concat(V{x[0], x[1]}, 1); });
  add_case("index_rows", {leaf<T>(rng, {4, 3})},
           [](const V& x) { return nn::index_rows(x[0], std::vector<std::size_t>{2, 0, 2, 3}); });
  add_case("sum", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::sum(x[0], 0); });
  add_case("mean", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::mean(x[0], 1, true); });
  add_case("sum_all", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::sum_all(x[0]); });
  add_case("mean_all", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::mean_all(x[0]); });
  add_case("softmax", {leaf<T>(rng, {3, 5})}, [](const V& x) { return nn::softmax(x[0]); });
  add_case("layer_norm", {leaf<T>(rng, {3, 6}), leaf<T>(rng, {6}, 0.3, 1.0), leaf<T>(rng, {6}, 0.3)},
           [](const V& x) { return nn::layer_norm(x[0], x[1], x[2]); });
  add_case("silu", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::silu(x[0]); });
  add_case("gelu", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::gelu(x[0]); });
  add_case("l2_normalize", {leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::l2_normalize(x[0]); });
  add_case("mse_loss", {leaf<T>(rng, {3, 4}), leaf<T>(rng, {3, 4})}, [](const V& x) { return nn::mse_loss(x[0], x[1]); });
  {
    // Keep every |pred - target| well away from the kink at 0.
    Tensor<T> target = leaf<T>(rng, {3, 4});
    std::vector<T> p(target.values().begin(), target.values().end());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += static_cast<T>(i % 2 ? 0.5 + 0.1 * i : -0.5 - 0.1 * i);
    add_case("l1_loss", {Tensor<T>::parameter({3, 4}, p), target}, [](const V& x) { return nn::l1_loss(x[0], x[1]); });
  }
  add_case("cross_entropy", {leaf<T>(rng, {4, 6})},
           [](const V& x) { return nn::cross_entropy(x[0], std::vector<std::size_t>{1, 5, 0, 3}); });
  return cs;
}

// Owns the modules so the closures stay valid.
template <typename T>
struct ModelCases {
  std::unique_ptr<tok::MingTok<T>> tokenizer;
  std::unique_ptr<PredictionHeads<T>> heads;
  std::unique_ptr<ar::UnifiedModel<T>> unified;
  Tensor<T> image, struct_features, sem_features;
  MaskPlan plan;
  std::vector<ar::Sequence<T>> batch;
  std::vector<Case<T>> cases;

  explicit ModelCases(std::size_t max_coords) {
    const auto cfg = tok::MingTokConfig::preset_named("micro");
    tokenizer = std::make_unique<tok::MingTok<T>>(cfg, 5);
    Rng rng(6);
    FrozenTeacher<T> st(cfg.resolution, cfg.base_patch, 6, 1, 7), se(cfg.resolution, cfg.base_patch, 10, 1, 8);
    heads = std::make_unique<PredictionHeads<T>>(cfg.latent_dim, 6, cfg.semantic_dim(), 10, rng);
    std::vector<T> px(cfg.resolution * cfg.resolution * 3);
    for (auto& v : px) v = static_cast<T>(rng.uniform());
    image = Tensor<T>::from({cfg.resolution, cfg.resolution, 3}, px);
    struct_features = st.features(image, "g");
    sem_features = se.features(image, "g");
    plan.total = cfg.tokens();
    plan.ratio = 0.5;
    plan.masked.assign(plan.total, false);
    plan.masked[1] = plan.masked[2] = true;
    ParamList<T> ps = tokenizer->parameters();
    for (auto& p : heads->parameters()) ps.push_back(p);
    cases.push_back({"mingtok_micro_end_to_end",
                     [this] {
                       return compute_losses(*tokenizer, *heads, image, plan, struct_features, sem_features,
                                             LossWeights{})
                           .total;
                     },
                     ps, max_coords});

    ar::BackboneConfig bc = ar::BackboneConfig::for_tokenizer(cfg);
    bc.width = 8;
    bc.depth = 1;
    bc.heads = 2;
    bc.max_context = 16;
    bc.flow.cond_dim = 8;
    bc.flow.hidden = 8;
    bc.flow.depth = 1;
    bc.flow.time_dim = 4;
    unified = std::make_unique<ar::UnifiedModel<T>>(bc, 9);
    ar::Sequence<T> seq{ar::SequenceItem<T>::text(ar::vocab::kBOS), ar::SequenceItem<T>::text('a'),
                        ar::SequenceItem<T>::text(ar::vocab::kBOI)};
    {
      nn::NoGradGuard guard;
      const auto lat = tokenizer->encode(image);
      const auto sem = tokenizer->expand(lat);
      for (std::size_t i = 0; i < lat.count(); ++i) {
        seq.push_back(ar::SequenceItem<T>::visual(nn::reshape(nn::slice(lat.tokens, 0, i, i + 1), {cfg.latent_dim}),
                                                  nn::reshape(nn::slice(sem.tokens, 0, i, i + 1), {cfg.semantic_dim()})));
      }
    }
    seq.push_back(ar::SequenceItem<T>::text(ar::vocab::kEOI));
    batch.push_back(seq);
    cases.push_back({"unified_joint_loss",
                     [this] {
                       Rng r(10);
                       return ar::joint_loss(*unified, batch, r).total;
                     },
                     unified->parameters(), max_coords});
  }
};

template <typename T>
GradCaseResult run_case(Case<T>& c, double eps, double tol, const char* precision) {
  GradCaseResult r;
  r.name = c.name;
  r.precision = precision;
  r.tolerance = tol;
  try {
    const auto res = nn::grad_check_params<T>(c.f, c.params, eps, c.max_coords);
    r.max_error = res.max_error;
    r.worst = res.worst;
    r.passed = res.max_error <= tol;
  } catch (const std::exception& e) {
    r.error = e.what();
    r.passed = false;
  }
  return r;
}

template <typename T>
void run_all(std::vector<GradCaseResult>& out, double eps, double tol, const char* precision, std::size_t max_coords) {
  for (auto& c : op_cases<T>()) out.push_back(run_case(c, eps, tol, precision));
  ModelCases<T> models(max_coords);
  for (auto& c : models.cases) out.push_back(run_case(c, eps, tol, precision));
}

}  // namespace

std::vector<GradCaseResult> run_grad_suite(bool f32) {
  std::vector<GradCaseResult> out;
  run_all<double>(out, 1e-6, 1e-5, "f64", 0);
  if (f32) run_all<float>(out, 1e-3, 1e-3, "f32", 0);
  return out;
}

nlohmann::json to_json(const GradCaseResult& r) {
  nlohmann::json j{{"case", r.name},     {"precision", r.precision}, {"max_rel_error", r.max_error},
                   {"tolerance", r.tolerance}, {"worst", r.worst},         {"passed", r.passed}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

}  // namespace mingtok::mim
