#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace conpet {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed corpus or config input. Carries the 1-based line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FrozenModuleError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, gradient or feature norm.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Cache log corruption or conflicting duplicate writes.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace conpet
