#pragma once

#include <stdexcept>
#include <string>

namespace st2n {

// Shapes of two operands disagree (dataset vs. basis, knot field vs. kernel, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A voxel has no knot within the taper radius.
class UncoveredVoxelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cholesky of a kernel or covariance matrix failed.
class DecompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed bundle, config or chain file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

inline void require_shape(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace st2n
