#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cover {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violated a documented precondition, range, or schema.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A trace or model document could not be parsed. Carries the 1-based line.
class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// The scorer cannot perform the requested operation (e.g. expansion on a
// trace-backed scorer).
class UnsupportedOperation : public Error {
 public:
  using Error::Error;
};

// The coverage constraint cannot be met by any quantile configuration.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// Conformal expansion grew beyond the configured node budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

}  // namespace cover
