#pragma once

#include <stdexcept>
#include <string>

namespace tempo {

/// Shape or dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Invalid configuration value (head counts, unknown keys, bad enums).
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Violated API contract (preconditions, tape misuse).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

/// Malformed file content; message carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tempo
