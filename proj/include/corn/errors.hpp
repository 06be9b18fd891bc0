#pragma once

#include <stdexcept>
#include <string>

namespace corn {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite or otherwise malformed numeric input.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Tensor dimensions do not match what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Filesystem or decoding failure. The message names the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

// A loss term evaluated to NaN or Inf; training must stop.
class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::string term)
      : Error("non-finite loss term: " + term), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace corn
