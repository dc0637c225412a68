#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lamoe {

// Base type for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or axis mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Input outside an operation's numeric domain (e.g. log of a non-positive value).
struct DomainError : Error {
  using Error::Error;
};

// Misuse of an operation contract (tape state, expert group alignment, ...).
struct ContractError : Error {
  using Error::Error;
};

// Malformed binary file: bad magic, truncation, count mismatch.
struct FormatError : Error {
  using Error::Error;
};

// Invalid configuration value or unknown configuration key.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite loss or other numeric failure during training.
struct TrainingError : Error {
  TrainingError(const std::string& msg, std::size_t step_) : Error(msg), step(step_) {}
  std::size_t step;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace lamoe
