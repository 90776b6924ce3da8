#pragma once

#include <stdexcept>
#include <string>

namespace modprune {

// Operand dimensions do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Math outside an operation's domain (log of a nonpositive value, non-finite input).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A caller broke a documented precondition (non-scalar loss, taps read before backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad user-facing input: mask length, missing data, malformed files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pruning plan that cannot be applied to the model it targets.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced NaN or diverged.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace modprune
