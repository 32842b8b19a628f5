#pragma once

#include <stdexcept>
#include <string>

namespace tailsam {

// Error categories. The numeric values are mirrored by tailsam_status in
// the C API, so append only.
enum class ErrorCode : int {
  Dimension = 1,
  Parameter = 2,
  InfeasibleProfile = 3,
  Geometry = 4,
  Shape = 5,
  EmptyClass = 6,
  Numeric = 7,
  Contract = 8,
  UndefinedRatio = 9,
  InsufficientSamples = 10,
  Io = 11,
  CorruptFile = 12,
  VersionMismatch = 13,
  Config = 14,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace tailsam
