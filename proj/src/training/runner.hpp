#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>

#include "io/images.hpp"
#include "json.hpp"
#include "training/mim.hpp"

namespace mingtok::mim {

struct DataConfig {
  std::string path;
  std::string format = "synthetic";  // png | tensor | synthetic
  std::size_t count = 4;             // synthetic only
};

DataConfig data_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json data_to_json(const DataConfig& d);
io::ImageSet load_data(const DataConfig& d, std::size_t resolution, std::uint64_t seed);

struct TeacherConfig {
  std::string mode = "frozen";  // frozen | files
  std::uint64_t seed = 0;
  std::string path;
};

// Tokenizer training run, validated before any compute.
struct TrainConfig {
  tok::MingTokConfig model;
  std::size_t steps = 100;
  std::size_t batch = 1;
  double lr = 1e-3;
  double mask_ratio = 0.4;
  LossWeights weights;
  std::uint64_t seed = 0;
  TeacherConfig teacher;
  DataConfig data;

  // "preset" names a built-in config; "model" gives an explicit one. Unknown
  // keys at any level are rejected with every offending key listed. Relative
  // data and teacher paths resolve against base_dir.
  static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

// Frozen stand-ins: structural teacher at the encoder width, semantic teacher
// at the semantic width. File teachers read "struct" and "sem" entries.
template <typename T>
TeacherBundle<T> make_teachers(const TrainConfig& config);

// Trains from config.seed, writing one metrics record per step. `progress`
// (optional) sees every report.
template <typename T>
std::unique_ptr<MingTok<T>> train_tokenizer(const TrainConfig& config, std::ostream* metrics,
                                            const std::function<void(const LossReport&, std::size_t)>& progress = {});

}  // namespace mingtok::mim
