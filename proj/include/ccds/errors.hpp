#pragma once

#include <stdexcept>
#include <string>

namespace ccds {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (non-scalar backward root, asymmetric adjacency, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (bundle files, too-short series, bad node index).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, solver non-convergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Binary checkpoint corruption or manifest mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ccds
