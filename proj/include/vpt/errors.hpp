#pragma once

#include <stdexcept>
#include <string>

namespace vptlab {

// Error taxonomy mirrored by the CLI exit codes: usage -> 2, data -> 3,
// numeric -> 4. Everything else escapes as a plain exception.
struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : std::invalid_argument {
  explicit shape_error(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace vptlab
