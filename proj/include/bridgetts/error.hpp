#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bridgetts {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  out_of_range,
  bad_magic,
  version_mismatch,
  truncated,
  dimension_mismatch,
  config_invalid,
  config_hash_mismatch,
  io,
  non_finite,
  not_found,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::out_of_range: return "out of range";
    case ErrorCode::bad_magic: return "bad magic";
    case ErrorCode::version_mismatch: return "version mismatch";
    case ErrorCode::truncated: return "truncated payload";
    case ErrorCode::dimension_mismatch: return "dimension mismatch";
    case ErrorCode::config_invalid: return "invalid config";
    case ErrorCode::config_hash_mismatch: return "config hash mismatch";
    case ErrorCode::io: return "io error";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::not_found: return "not found";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace bridgetts
