#pragma once

#include <stdexcept>
#include <string>

namespace convt {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or sizes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (model, augmentation, training, CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file contents (checkpoints, CSV, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace convt
