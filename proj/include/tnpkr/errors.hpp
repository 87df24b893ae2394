#pragma once

#include <stdexcept>
#include <string>

namespace tnpkr {

// Error taxonomy maps onto CLI exit codes: config 2, data 3, numeric 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when the tracked-allocation budget would be exceeded. Bench harness
// catches this and records an OOM row instead of aborting.
struct OomError : NumericError {
  using NumericError::NumericError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tnpkr
