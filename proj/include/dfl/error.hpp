#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dfl {

// Base for all engine errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Model construction failed (incompatible specs, bad init).
class BuildError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values or combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf, invalid probability distributions, numeric breakdown.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Datasets: missing/corrupt files, out-of-range labels.
class DataError : public Error {
 public:
  using Error::Error;
};

// Operations invoked out of protocol order.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. backward on a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Training aborted on a non-finite loss; keeps enough context to report
// the step and the tensor that went bad.
class TrainAbortError : public NumericError {
 public:
  TrainAbortError(int64_t step, std::string tensor, const std::string& msg)
      : NumericError(msg), step_(step), tensor_(std::move(tensor)) {}
  int64_t step() const { return step_; }
  const std::string& tensor() const { return tensor_; }

 private:
  int64_t step_;
  std::string tensor_;
};

}  // namespace dfl
