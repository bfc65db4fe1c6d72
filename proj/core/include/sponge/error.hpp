#pragma once

#include <stdexcept>
#include <string>

namespace sponge {

enum class ErrorKind {
  kShape,    // tensor extents do not line up
  kConfig,   // invalid knob or argument value
  kSpec,     // invalid architecture specification
  kData,     // empty or inconsistent data
  kFormat,   // corrupt or unsupported file
  kState,    // object used before it is ready (e.g. uncalibrated model)
  kNumeric,  // non-finite values during optimization
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class SpecError : public Error {
 public:
  explicit SpecError(const std::string& what) : Error(ErrorKind::kSpec, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

/// Raised while decoding files. `offset` is the byte position where decoding
/// failed, or npos when the failure is not tied to a position.
class FormatError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit FormatError(const std::string& what, std::size_t offset = npos)
      : Error(ErrorKind::kFormat, what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorKind::kState, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

}  // namespace sponge
