#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctseg {

enum class ErrorCode {
  kInvalidArgument,
  kInvalidWindow,
  kEncoding,
  kSchemaViolation,
  kShape,
  kMissingFile,
  kDuplicateId,
  kDanglingPath,
  kUnknownLabel,
  kParse,
  kUnknownLayer,
  kNonFinite,
  kEmptyInput,
  kMismatch,
  kGeometry,
  kIo,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kInvalidWindow: return "invalid-window";
    case ErrorCode::kEncoding: return "encoding";
    case ErrorCode::kSchemaViolation: return "schema-violation";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kMissingFile: return "missing-file";
    case ErrorCode::kDuplicateId: return "duplicate-id";
    case ErrorCode::kDanglingPath: return "dangling-path";
    case ErrorCode::kUnknownLabel: return "unknown-label";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kUnknownLayer: return "unknown-layer";
    case ErrorCode::kNonFinite: return "non-finite";
    case ErrorCode::kEmptyInput: return "empty-input";
    case ErrorCode::kMismatch: return "mismatch";
    case ErrorCode::kGeometry: return "geometry";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so that
/// callers (and the CLI) can branch on the kind of error without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace ctseg
