#pragma once

#include <stdexcept>
#include <string>

namespace setnet {

// Shape disagreement between operands or against an operation contract.
struct dim_error : std::runtime_error {
  explicit dim_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Statistics requested over an empty group of elements.
struct degenerate_input_error : std::runtime_error {
  explicit degenerate_input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents.
struct parse_error : std::runtime_error {
  explicit parse_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace setnet
