#include "training/runner.hpp"

#include <ostream>
#include <set>

namespace mingtok::mim {

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

std::string resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  return path.is_relative() && !base.empty() ? (base / path).string() : p;
}

}  // namespace

DataConfig data_from_json(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"path", "format", "count"}, "data");
  DataConfig d;
  d.format = field<std::string>(j, "format", d.format, "data");
  d.path = resolve(field<std::string>(j, "path", "", "data"), base_dir);
  d.count = field<std::size_t>(j, "count", d.count, "data");
  if (d.format != "synthetic" && d.path.empty()) throw ValidationError("data: 'path' is required for " + d.format);
  return d;
}

json data_to_json(const DataConfig& d) { return json{{"path", d.path}, {"format", d.format}, {"count", d.count}}; }

io::ImageSet load_data(const DataConfig& d, std::size_t resolution, std::uint64_t seed) {
  return io::load_images(d.path, d.format, resolution, d.count, seed);
}

TrainConfig TrainConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  const std::string where = "training config";
  reject_unknown(j, {"preset", "model", "steps", "batch", "lr", "mask_ratio", "weights", "seed", "teacher", "data"},
                 where);
  TrainConfig c;
  if (j.contains("model") == j.contains("preset")) {
    throw ValidationError(where + ": give exactly one of 'preset' or 'model'");
  }
  c.model = j.contains("model") ? tok::MingTokConfig::from_json(j.at("model"))
                                : tok::MingTokConfig::preset_named(field<std::string>(j, "preset", "", where));
  c.steps = field<std::size_t>(j, "steps", c.steps, where);
  c.batch = field<std::size_t>(j, "batch", c.batch, where);
  c.lr = field<double>(j, "lr", c.lr, where);
  c.mask_ratio = field<double>(j, "mask_ratio", c.mask_ratio, where);
  c.seed = field<std::uint64_t>(j, "seed", c.seed, where);
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    reject_unknown(w, {"lat", "sem", "pix"}, where + ".weights");
    c.weights.lat = field<double>(w, "lat", c.weights.lat, where + ".weights");
    c.weights.sem = field<double>(w, "sem", c.weights.sem, where + ".weights");
    c.weights.pix = field<double>(w, "pix", c.weights.pix, where + ".weights");
  }
  if (j.contains("teacher")) {
    const json& t = j.at("teacher");
    reject_unknown(t, {"mode", "seed", "path"}, where + ".teacher");
    c.teacher.mode = field<std::string>(t, "mode", c.teacher.mode, where + ".teacher");
    c.teacher.seed = field<std::uint64_t>(t, "seed", c.seed + 1, where + ".teacher");
    c.teacher.path = resolve(field<std::string>(t, "path", "", where + ".teacher"), base_dir);
  } else {
    c.teacher.seed = c.seed + 1;
  }
  if (c.teacher.mode != "frozen" && c.teacher.mode != "files") {
    throw ValidationError(where + ".teacher: mode must be 'frozen' or 'files'");
  }
  if (c.teacher.mode == "files" && c.teacher.path.empty()) {
    throw ValidationError(where + ".teacher: 'path' is required for mode 'files'");
  }
  c.data = j.contains("data") ? data_from_json(j.at("data"), base_dir) : DataConfig{};
  if (c.steps == 0 || c.batch == 0) throw ValidationError(where + ": steps and batch must be positive");
  if (!(c.lr > 0)) throw ValidationError(where + ": lr must be positive");
  if (!(c.mask_ratio >= 0 && c.mask_ratio <= 1)) throw ValidationError(where + ": mask_ratio must lie in [0, 1]");
  return c;
}

json TrainConfig::to_json() const {
  json teacher{{"mode", this->teacher.mode}};
  if (this->teacher.mode == "frozen") {
    teacher["seed"] = this->teacher.seed;
  } else {
    teacher["path"] = this->teacher.path;
  }
  return json{{"model", model.to_json()},
              {"steps", steps},
              {"batch", batch},
              {"lr", lr},
              {"mask_ratio", mask_ratio},
              {"weights", json{{"lat", weights.lat}, {"sem", weights.sem}, {"pix", weights.pix}}},
              {"seed", seed},
              {"teacher", teacher},
              {"data", data_to_json(data)}};
}

template <typename T>
TeacherBundle<T> make_teachers(const TrainConfig& config) {
  const auto& m = config.model;
  TeacherBundle<T> b;
  if (config.teacher.mode == "frozen") {
    b.structural =
        std::make_shared<FrozenTeacher<T>>(m.resolution, m.base_patch, m.low.embed_dim, 1, config.teacher.seed);
    b.semantic =
        std::make_shared<FrozenTeacher<T>>(m.resolution, m.base_patch, m.semantic_dim(), 2, config.teacher.seed + 1);
  } else {
    // Widths are read from the first data key's feature file.
    const auto keys = load_data(config.data, m.resolution, config.seed).keys;
    b.structural = std::make_shared<FileTeacher<T>>(config.teacher.path, "struct",
                                                    teacher_file_dim(config.teacher.path, keys.at(0), "struct"));
    b.semantic = std::make_shared<FileTeacher<T>>(config.teacher.path, "sem",
                                                  teacher_file_dim(config.teacher.path, keys.at(0), "sem"));
  }
  return b;
}

template <typename T>
std::unique_ptr<MingTok<T>> train_tokenizer(const TrainConfig& config, std::ostream* metrics,
                                            const std::function<void(const LossReport&, std::size_t)>& progress) {
  const io::ImageSet data = load_data(config.data, config.model.resolution, config.seed);
  std::vector<Tensor<T>> images;
  for (const auto& im : data.images) {
    auto v = im.values();
    images.push_back(Tensor<T>::from(im.shape(), std::vector<T>(v.begin(), v.end())));
  }
  auto model = std::make_unique<MingTok<T>>(config.model, config.seed);
  TrainOptions options;
  options.lr = config.lr;
  options.mask_ratio = config.mask_ratio;
  options.weights = config.weights;
  options.seed = config.seed;
  MimTrainer<T> trainer(*model, make_teachers<T>(config), options);
  const std::size_t n = images.size();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<Tensor<T>> batch;
    std::vector<std::string> keys;
    for (std::size_t i = 0; i < config.batch; ++i) {
      const std::size_t k = ((step - 1) * config.batch + i) % n;
      batch.push_back(images[k]);
      keys.push_back(data.keys[k]);
    }
    const LossReport report = trainer.train_step(batch, keys);
    if (metrics) *metrics << report.to_json(step).dump() << '\n';
    if (progress) progress(report, step);
  }
  return model;
}

template TeacherBundle<float> make_teachers<float>(const TrainConfig&);
template TeacherBundle<double> make_teachers<double>(const TrainConfig&);
template std::unique_ptr<MingTok<float>> train_tokenizer<float>(
    const TrainConfig&, std::ostream*, const std::function<void(const LossReport&, std::size_t)>&);
template std::unique_ptr<MingTok<double>> train_tokenizer<double>(
    const TrainConfig&, std::ostream*, const std::function<void(const LossReport&, std::size_t)>&);

}  // namespace mingtok::mim
