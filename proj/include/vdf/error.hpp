#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vdf {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or volume shapes disagree.  `axis` names the offending axis.
class DimensionError : public Error {
 public:
  DimensionError(std::string axis, const std::string& what)
      : Error("dimension error [" + axis + "]: " + what), axis_(std::move(axis)) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation error: " + what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
};

/// Loss or activation became non-finite.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical error: " + what) {}
};

/// Malformed binary input.  `offset` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(std::uint64_t offset, const std::string& what)
      : Error("parse error at offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& what) : Error("checksum error: " + what) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error("version error: " + what) {}
};

/// Input set is empty where at least one element is required.
class EmptyInputError : public Error {
 public:
  explicit EmptyInputError(const std::string& what) : Error("empty input: " + what) {}
};

}  // namespace vdf
