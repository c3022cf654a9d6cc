#pragma once

#include <stdexcept>
#include <string>

namespace smac {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or arity mismatch while building a graph or moving parameters around.
struct DimensionError : Error {
  using Error::Error;
};

// NaN/Inf produced by an op, or handed to one.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: backward on a non-scalar root, missing gradient key,
// mismatched parameter stores, invalid configuration values.
struct ContractError : Error {
  using Error::Error;
};

// Checkpoint, config or report file problems.
struct FileError : Error {
  using Error::Error;
};

// Bad command line input or unknown config key.
struct UsageError : Error {
  using Error::Error;
};

// Tripped divergence guard during training.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace smac
