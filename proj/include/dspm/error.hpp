#pragma once

#include <stdexcept>
#include <string>

namespace dspm {

// Base for every error raised by the library. Subclasses map onto the
// error kinds callers need to tell apart (the CLI turns UsageError into
// exit code 2, everything else into 1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t offset, const std::string& what)
      : Error(path + ":" + std::to_string(offset) + ": " + what), path_(path), offset_(offset) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string path_;
  std::size_t offset_;
};

}  // namespace dspm
