#pragma once

#include <stdexcept>
#include <string>

namespace fairmedl {

// Error taxonomy shared across the library. The CLI maps ConfigError and
// IngestionError to exit code 2, everything else to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes.
struct DimensionError : Error {
  using Error::Error;
};

// A caller violated an operation's precondition.
struct ContractError : Error {
  using Error::Error;
};

// Invalid configuration value (weights, schema, CLI flags).
struct ConfigError : Error {
  using Error::Error;
};

// Problems reading or interpreting input files.
struct IngestionError : Error {
  using Error::Error;
};

// Input is structurally valid but statistically degenerate (e.g. zero
// variance where a correlation is required).
struct DegenerateInputError : Error {
  using Error::Error;
};

}  // namespace fairmedl
