#pragma once

#include <stdexcept>
#include <string>

namespace sona {

/// Caller passed a value outside an operation's contract.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid or inconsistent configuration (schedules, optimizers, config files).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed archive or config file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN or Inf surfaced during computation. Carries the name of the op that produced it.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string op, const std::string& detail)
      : std::runtime_error("non-finite value in '" + op + "': " + detail), op_(std::move(op)) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace sona
