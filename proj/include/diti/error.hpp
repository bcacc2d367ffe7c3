#pragma once

#include <stdexcept>
#include <string>

namespace diti {

/// Raised when a caller violates an operation's precondition
/// (shape mismatch, index out of range, invalid configuration).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an optimisation run cannot continue (NaN loss, degenerate labels).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace diti
