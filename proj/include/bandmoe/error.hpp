#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace bandmoe {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

// Base of every error raised by the library. The CLI maps ConfigError and
// UsageError to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, Shape lhs, Shape rhs);

  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  Shape lhs_;
  Shape rhs_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace bandmoe
