#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace unibf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's domain (negative power, zero channel...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Cholesky factorization hit a non-positive pivot.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed persisted file. `location` is a 1-based line number for text
/// formats and a byte offset for binary ones.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t location)
      : Error(what), location_(location) {}
  std::size_t location() const noexcept { return location_; }

 private:
  std::size_t location_;
};

/// Invalid user configuration (flags, config fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace unibf
