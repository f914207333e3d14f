#pragma once

#include <stdexcept>
#include <string>

namespace taseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid model/run configuration or violated precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (images, manifests, embedding files).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Optimizer touched a frozen parameter.
class FreezeViolation : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, BadChecksum, Truncated, Malformed, Mismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace taseg
