#pragma once

#include <stdexcept>
#include <string>

namespace pmx {

/// Bad input: malformed files, invalid configuration, unknown flags.
/// The CLI maps these to exit code 1.
class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DataError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class UsageError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// Tensor shape contract violated.
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during training.
class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace pmx
