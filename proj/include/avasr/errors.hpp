#pragma once

#include <stdexcept>
#include <string>

namespace avasr {

// Shape/axis disagreement between tensors or masks.
struct DimError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid construction-time setting (vocab size, head count, gamma range, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition (non-scalar loss, missing targets, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// File-level failure: missing feature file, malformed manifest line, bad checkpoint.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace avasr
