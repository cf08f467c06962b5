#pragma once

#include <stdexcept>
#include <string>

namespace knnfuse {

// Base class for every error this library raises on purpose. Callers that
// want a single catch-all can catch this; the CLI maps subclasses to exit
// codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on an argument was violated (zero dimension, empty text,
// ef_search < m, ...).
class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

// Vector/matrix dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An id that must be unique already exists.
class ConflictError : public Error {
 public:
  using Error::Error;
};

// Numeric payload is unusable (NaN/Inf components).
class DataError : public Error {
 public:
  using Error::Error;
};

// A file does not carry the expected magic bytes or format version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A file is structurally damaged (truncated, impossible counts).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// A key that should resolve does not (missing table row, unknown id).
class LookupError : public Error {
 public:
  using Error::Error;
};

// Two inputs that must agree do not (mismatched id sets).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// An experiment/run configuration is infeasible or malformed.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Optimization failed (divergence, NaN loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Filesystem problem (missing input, unwritable output).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace knnfuse
