#pragma once

#include <stdexcept>
#include <string>

namespace sarnet {

/// Incompatible tensor dimensions. The message names the offending axis.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value (enumeration, kernel size, head count, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file content. Carries the byte offset or line where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, long long position)
      : std::runtime_error(what + " (at " + std::to_string(position) + ")"), position_(position) {}
  long long position() const { return position_; }

 private:
  long long position_;
};

/// Non-finite value produced while NaN screening is enabled.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sarnet
