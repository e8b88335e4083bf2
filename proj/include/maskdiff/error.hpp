#pragma once

#include <stdexcept>
#include <string>

namespace maskdiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition or invalid configuration (bad timestep, shape
/// mismatch, out-of-range hyperparameter).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate arithmetic.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or corrupted files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A metric whose denominator is zero for the given counts.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace maskdiff
