#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cbfe {

/// Bad input: shapes that do not match, out-of-range options, unsupported graph families.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed text input. Carries the 1-based line number of the offending line.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& cause)
      : std::runtime_error("line " + std::to_string(line) + ": " + cause), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A computation that cannot produce a finite answer (divergent messages,
/// singular counting numbers, exhausted retries).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Counting numbers at which the generalized message exponents are undefined.
class SingularCountingError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Exact inference refused because an intermediate table would be too large.
class ModelTooLarge : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cbfe
