#pragma once

#include <stdexcept>
#include <string>

namespace slimconv {

// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operation was called with arguments that break its preconditions
// (mismatched shapes, odd channel counts where halves are required, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A hyperparameter combination cannot produce a valid layer or model.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. reading gradients before a backward pass.
class UsageError : public Error {
 public:
  using Error::Error;
};

class UnsupportedLayer : public Error {
 public:
  using Error::Error;
};

// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A JSON document did not match the expected schema. `pointer()` is a
// JSON-pointer style location of the offending value ("/stages/1/width").
class SpecError : public Error {
 public:
  SpecError(std::string pointer, const std::string& what)
      : Error(pointer + ": " + what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

}  // namespace slimconv
