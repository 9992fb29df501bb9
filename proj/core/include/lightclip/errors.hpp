#pragma once

#include <stdexcept>
#include <string>

namespace lightclip {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform. The message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Numerical domain violation (log of a non-positive value, zero-norm row).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract (backward on a non-scalar, replayed tape).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed user data (token id out of vocabulary, ragged CSV, empty matrix).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Batch too small for a contrastive objective.
class BatchError : public Error {
 public:
  using Error::Error;
};

class ScheduleError : public Error {
 public:
  using Error::Error;
};

/// The exhaustive matcher was asked to enumerate too many matchings.
class OracleSizeError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Serialized tensor container failed validation.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lightclip
