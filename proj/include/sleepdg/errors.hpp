#pragma once

#include <stdexcept>
#include <string>

namespace sleepdg {

/// Operand extents do not conform to what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value lies outside the mathematical domain of an operation (log of a
/// non-positive value, for instance).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A precondition of a public operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace sleepdg
