#pragma once

#include <stdexcept>
#include <string>

namespace xda {

// Shape or size disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values or values outside an operation's numeric domain.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated a precondition that is not about shapes or numbers.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or mismatched files (configs, checkpoints, images).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xda
