#pragma once

#include <stdexcept>
#include <string>

namespace eviscrib {

/// Invalid sizes, missing keys or inconsistent settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric argument outside the domain of the function (e.g. tau <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller broke a documented precondition (shape mismatch, non one-hot target).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Filesystem or format failure. The message always names the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace eviscrib
