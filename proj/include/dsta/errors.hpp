#pragma once

#include <stdexcept>
#include <string>

namespace dsta {

// Root of every error raised by the library. The CLI maps the subclasses to
// process exit codes (see tools/).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model / training / experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad inputs: labels out of range, videos too small, malformed files.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Checkpoint could not be read back.
class LoadError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace dsta
