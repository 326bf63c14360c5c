#pragma once

#include <stdexcept>
#include <string>

namespace dfsd {

/// Bad input to a public operation (shape mismatch, out-of-range value).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A binary file whose header or version does not match what we write.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input. `line` is 1-based; 0 when the whole file is at fault.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A caller-supplied callback broke its contract (e.g. non-deterministic loss).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training produced a NaN/Inf. The message carries the offending batch.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dfsd

namespace dfsd {

/// An encoded sample would not fit the model's context window.
class LengthError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

}  // namespace dfsd
