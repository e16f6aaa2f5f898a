#pragma once

#include <stdexcept>
#include <string>

namespace fmtl {

// Base of every structured error raised by the library. The CLI maps
// ConfigError/ArgumentError to exit code 2 and IoError to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Two parameter layouts differ in (name, length) sequence. Surfaced by the
// run engine as a "null_baseline" outcome rather than a crash.
class LayoutMismatch : public Error {
 public:
  using Error::Error;
};

class TaskMismatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmtl
