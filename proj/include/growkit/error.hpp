#pragma once

#include <stdexcept>
#include <string>

namespace growkit {

// Error taxonomy. Each failure names what went wrong and, where it helps,
// the offending shapes/paths/indices in the message.

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated caller/callee contract (preconditions, non-scalar where scalar
// expected, non-finite values, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid growth plan (bad insertion positions, shrinking targets, ...).
struct PlanError : std::runtime_error {
  explicit PlanError(const std::string& msg) : std::runtime_error(msg) {}
};

// Reference-logit cache cannot be used (fingerprint mismatch, corrupt file).
struct CacheError : std::runtime_error {
  explicit CacheError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace growkit
