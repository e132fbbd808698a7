#pragma once

#include <stdexcept>
#include <string>

namespace dmc {

// Error taxonomy mirrored by CLI exit codes: I/O → 2, validation → 3,
// numeric → 4, anything else → 1.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dmc
