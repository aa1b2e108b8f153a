#pragma once

#include <stdexcept>
#include <string>

namespace spcl {

// Base of every error raised by the library. The category decides the CLI
// exit code: configuration and usage problems, data/format problems, and
// numerical failures are reported differently.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters, mask ratios, geometry, or config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files, unsupported versions, I/O failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, degenerate embeddings, contract violations on unit
// vectors.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace spcl
