#pragma once

#include <stdexcept>
#include <string>

namespace stllm {

/// Base of every error raised by the library. Subclasses map onto CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an op's broadcasting or contraction rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, malformed, or out-of-domain input data (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf loss or divergence during training (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace stllm
