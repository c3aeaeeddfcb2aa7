#pragma once

#include <stdexcept>
#include <string>

namespace msnet {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or channel counts that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (model, block, interlace or run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Files that cannot be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace msnet
