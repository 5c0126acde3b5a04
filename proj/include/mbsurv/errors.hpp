#pragma once

#include <stdexcept>
#include <string>

namespace mbsurv {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented contract (bad schema, bad row, bad config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A serialized model was produced for a different feature schema.
class SchemaMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Partial likelihood requested on a set without a single observed death.
class AllCensoredError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Metric has no defined value on the given data (no comparable pairs, zero range, ...).
class UndefinedMetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace mbsurv
