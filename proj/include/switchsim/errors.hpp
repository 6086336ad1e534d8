// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace switchsim {

/// Raised when a caller violates a precondition: bad shapes, out-of-range
/// hyperparameters, unknown config keys.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or consumes non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint written by an incompatible format revision.
class UnsupportedVersion : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint bytes are truncated or inconsistent with the header.
class CorruptionError : public std::runtime_error {
 public:
  CorruptionError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace switchsim
