#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rmpg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// An extent is not divisible by the product of hierarchy breadths.
struct DivisibilityError : DimensionError {
  using DimensionError::DimensionError;
};

// A documented precondition of an operation was violated.
struct ContractError : Error {
  using Error::Error;
};

// A handle does not refer to anything that exists.
struct LookupError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

// Malformed or truncated binary file.
struct FormatError : Error {
  using Error::Error;
};

// Exhaustive enumeration would exceed the configured bound.
struct CapacityError : Error {
  using Error::Error;
};

// NaN or Inf produced by a computation.
struct NumericError : Error {
  using Error::Error;
};

struct TrainingError : NumericError {
  TrainingError(std::size_t step_index, const std::string& what)
      : NumericError("step " + std::to_string(step_index) + ": " + what), step(step_index) {}
  std::size_t step;
};

}  // namespace rmpg
