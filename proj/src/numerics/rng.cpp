#include "numerics/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "numerics/error.hpp"

namespace mingtok::nn {

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ValidationError("rng: below(0)");
  // Rejection on the top of the range keeps every residue equally likely.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(std::uint64_t seed, const std::string& state) {
  seed_ = seed;
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw ValidationError("rng: malformed engine state");
}

}  // namespace mingtok::nn
