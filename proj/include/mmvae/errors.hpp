#pragma once

#include <stdexcept>
#include <string>

namespace mmvae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or design dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input violates a documented precondition (range, finiteness, stale state).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A covariance or normal-equation matrix is not numerically positive definite.
class ConditioningError : public Error {
 public:
  ConditioningError(const std::string& what, double min_eigenvalue)
      : Error(what + " (smallest eigenvalue estimate " + std::to_string(min_eigenvalue) + ")"),
        min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

/// Malformed or incomplete dataset content.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Synthetic generator configuration produced no usable cohort.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// A nested-model fit ended below its reduced counterpart.
class OptimizationError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmvae
