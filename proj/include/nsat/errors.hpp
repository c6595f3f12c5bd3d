#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nsat {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (group counts, patch sizes, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object in the wrong state (e.g. eval-mode batch
// norm before running statistics exist).
class StateError : public Error {
 public:
  using Error::Error;
};

// API contract violation (non-scalar loss, mixed payload kinds, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A bag or set with zero elements where at least one is required.
class EmptySetError : public Error {
 public:
  using Error::Error;
};

// Metric undefined for the given inputs (single-class AUC, zero nodules).
class MetricError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents; carries the byte offset of the defect.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::size_t offset)
      : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Filesystem-level failure (cannot open/read/write).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace nsat
