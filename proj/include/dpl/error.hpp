#pragma once

#include <stdexcept>
#include <string>

namespace dpl {

enum class ErrorCode {
  kShapeMismatch,
  kNonFinite,
  kInvalidArgument,
  kBadMagic,
  kBadVersion,
  kBadKind,
  kDimensionOverflow,
  kTruncated,
  kIo,
  kConfig,
  kDivergence,
  kMissingData,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kBadVersion: return "unsupported version";
    case ErrorCode::kBadKind: return "bad payload kind";
    case ErrorCode::kDimensionOverflow: return "dimension overflow";
    case ErrorCode::kTruncated: return "truncated file";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kDivergence: return "numeric divergence";
    case ErrorCode::kMissingData: return "missing data";
  }
  return "unknown error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dpl
