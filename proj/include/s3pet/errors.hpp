#pragma once

#include <stdexcept>
#include <string>

namespace s3pet {

// Base for every error the library throws. `exit_code()` is what the CLI
// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

// Bad configuration: illegal site, infeasible budget, unknown field.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class InputError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

// Non-finite loss or intermediate during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Malformed structure/config/backbone file. Carries the offending field.
class ParseError : public Error {
 public:
  ParseError(const std::string& field, const std::string& what)
      : Error("parse error at '" + field + "': " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }
  int exit_code() const noexcept override { return 1; }

 private:
  std::string field_;
};

// Structure refers to a site the backbone does not have.
class MismatchError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

}  // namespace s3pet
