#pragma once

#include <stdexcept>
#include <string>

namespace reflctrl {

// All library failures derive from Error so callers can catch one type at the
// CLI boundary. Subclasses exist where tests or callers branch on the kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error("validation failed on '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  AlignmentError(long long offset, const std::string& what)
      : Error("token alignment failed at char offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  long long offset() const noexcept { return offset_; }

 private:
  long long offset_;
};

class ExtractionError : public Error {
 public:
  using Error::Error;
};

class CoverageError : public ExtractionError {
 public:
  using ExtractionError::ExtractionError;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Raised when an operation would combine incompatible artifacts, e.g. a
// direction set extracted from a different model.
class RefusalError : public Error {
 public:
  using Error::Error;
};

class AdapterError : public Error {
 public:
  using Error::Error;
};

}  // namespace reflctrl
