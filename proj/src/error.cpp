#include "tailsam/error.hpp"

namespace tailsam {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Parameter: return "parameter";
    case ErrorCode::InfeasibleProfile: return "infeasible_profile";
    case ErrorCode::Geometry: return "geometry";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::EmptyClass: return "empty_class";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::UndefinedRatio: return "undefined_ratio";
    case ErrorCode::InsufficientSamples: return "insufficient_samples";
    case ErrorCode::Io: return "io";
    case ErrorCode::CorruptFile: return "corrupt_file";
    case ErrorCode::VersionMismatch: return "version_mismatch";
    case ErrorCode::Config: return "config";
  }
  return "unknown";
}

}  // namespace tailsam
