#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace mingtok::nn {

// Deterministic generator used everywhere in the library. Distributions are
// derived from the raw 64-bit stream by hand so that outputs do not depend on
// the standard library's distribution implementations.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller (one draw per call).
  double normal();
  // Unbiased integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  std::vector<T> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<T> out(n);
    for (auto& v : out) v = static_cast<T>(normal() * stddev);
    return out;
  }

  // Textual engine state for checkpoints.
  std::string state() const;
  void restore(std::uint64_t seed, const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace mingtok::nn
