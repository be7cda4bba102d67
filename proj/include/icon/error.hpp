#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace icon {

enum class ErrorKind {
  invalid_argument,
  out_of_range,
  shape_mismatch,
  numeric,
  io,
  config,
  data,
};

inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::out_of_range: return "out_of_range";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so the CLI can print a
/// stable `error: <kind>: <message>` line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace icon
