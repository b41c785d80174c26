#pragma once

#include <stdexcept>
#include <string>

namespace mmlg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: shapes, ranges, configuration. CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnsupportedDepthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Checkpoint container problems. `field` names the offending header field.
class FormatError : public ValidationError {
 public:
  FormatError(std::string field, const std::string& what)
      : ValidationError(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Non-finite loss or divergence. CLI exit code 2.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace mmlg
