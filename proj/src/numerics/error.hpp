#pragma once

#include <stdexcept>
#include <string>

namespace mingtok {

// Bad shapes, bad configs, bad arguments. Maps to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf detected in a forward value or a loss. Maps to exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing or malformed files. Reported like a validation error.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mingtok
