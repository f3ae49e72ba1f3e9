#pragma once

#include <stdexcept>
#include <string>

namespace phyformer {

// Dimension or shape disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, zero-variance guards and similar numeric failures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Ill-conditioned linear systems (e.g. rank-deficient MMSE at zero noise).
struct ConditioningError : NumericError {
  using NumericError::NumericError;
};

// Caller violated an operation precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed, truncated or version-mismatched files.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace phyformer
