#pragma once

#include <stdexcept>
#include <string>

namespace partalign {

// Thrown when a computation produces or receives non-finite values
// (NaN loss, failed gradient check). Maps to exit code 2 in the CLI.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failures. Maps to exit code 3 in the CLI.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace partalign
