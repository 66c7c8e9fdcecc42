#pragma once

#include <stdexcept>
#include <string>

namespace certvote {

// Error taxonomy mirrored by the CLI exit codes: config -> 2, data -> 3,
// numeric -> 4. ShapeError and InsufficientExamplesError are data errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class InsufficientExamplesError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace certvote
