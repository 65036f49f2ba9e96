#pragma once

#include <stdexcept>
#include <string>

namespace crnkit {

// Shape or width mismatch between tensors handed to an op.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Out-of-range element, label, or axis.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Invalid model, stream, or run configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Subset sampling cannot satisfy its feasibility preconditions.
struct SamplingError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: calling into an object in a state its contract forbids.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed bundle or config file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (open, read, write).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace crnkit
