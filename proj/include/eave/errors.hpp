#pragma once

#include <stdexcept>
#include <string>

namespace eave {

// Shape or dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data that violates a documented invariant (corpus records, configs).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Corrupted or truncated on-disk artifact.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cached heavy representations produced by a different model.
class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged or produced a non-finite gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace eave
