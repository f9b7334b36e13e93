#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fcdn {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible. The message names the offending dims.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input too small for the operation (pooling a 1-pixel map, batch norm over
// a single value, cropping to something larger than the source).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// A gradient or loss became NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value or config-file syntax. `line` is 1-based, 0 when the
// error is not tied to a file line.
class ConfigError : public Error {
 public:
  ConfigError(std::size_t line, const std::string& what)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line), detail_(what) {}
  std::size_t line() const noexcept { return line_; }
  // Message without the line prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

// File missing, truncated, or not in the expected format.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fcdn
