#pragma once

#include <stdexcept>
#include <string>

namespace radloc {

// Exit codes used by the command-line tool; every error type maps to one.
enum class ErrorKind : int {
  kInternal = 1,
  kConfig = 2,
  kIo = 3,
  kNumerical = 4,
  kRange = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }
  const char* kind_name() const noexcept;

 private:
  ErrorKind kind_;
};

/// Invalid configuration: non-divisible grid limits, bad shapes, unknown keys.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

/// Missing or malformed files.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

/// Non-finite activations, singular covariances, diverging training.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::kNumerical, what) {}
};

/// A value outside the domain an operation accepts (e.g. target outside the grid).
class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what) : Error(ErrorKind::kRange, what) {}
};

inline const char* Error::kind_name() const noexcept {
  switch (kind_) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kInternal: break;
  }
  return "internal";
}

}  // namespace radloc
