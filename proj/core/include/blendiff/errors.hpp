#pragma once

#include <stdexcept>
#include <string>

namespace blendiff {

// Error taxonomy mirrored by the CLI exit codes:
//   usage=1, config=2, contract/invariant=3, numeric=4.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace blendiff
