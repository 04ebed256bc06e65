#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace mingtok::mim {

struct GradCaseResult {
  std::string name;       // op or model name
  std::string precision;  // "f64" or "f32"
  double max_error = 0;
  double tolerance = 0;
  std::string worst;
  bool passed = false;
  std::string error;  // set when the case threw
};

// Finite-difference checks of every differentiable op plus the micro-preset
// end-to-end tokenizer loss and the joint sequence loss, in 64-bit (rel. err
// <= 1e-5) and 32-bit (<= 1e-3).
std::vector<GradCaseResult> run_grad_suite(bool f32 = true);
nlohmann::json to_json(const GradCaseResult& r);

}  // namespace mingtok::mim
