#pragma once

#include <stdexcept>
#include <string>

namespace citycond {

// Invalid configuration or unsupported option combination (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Problem with dataset files or contents (CLI exit code 3).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training/evaluation failure such as NaN gradients (CLI exit code 4).
struct RunError : std::runtime_error {
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace citycond
