#pragma once

#include <stdexcept>
#include <string>

namespace sure {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument value (CLI exit code 1).
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Tensor shapes that do not fit together.
class ShapeError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// Vector whose norm is too small to normalize.
class DegenerateVectorError : public Error {
public:
  using Error::Error;
};

/// A metric that is undefined for the given records (e.g. AUROC with one class).
class UndefinedMetricError : public Error {
public:
  using Error::Error;
};

/// NaN or Inf reached a loss, gradient or parameter (CLI exit code 2).
class DivergenceError : public Error {
public:
  using Error::Error;
};

/// File could not be read, written or parsed (CLI exit code 3).
class IoError : public Error {
public:
  using Error::Error;
};

/// Broken internal invariant (tape corruption and the like).
class InternalError : public Error {
public:
  using Error::Error;
};

}  // namespace sure
