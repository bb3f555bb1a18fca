#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dfx {

enum class ErrorCode {
  kNonFiniteInput,
  kInvalidBitWidth,
  kExponentOverflow,
  kShapeMismatch,
  kAccumulatorOverflow,
  kDegenerateBatch,
  kCacheMismatch,
  kNonPositiveInput,
  kLearningRateTooLarge,
  kDatasetNotFound,
  kConfigInvalid,
  kUnknownSuite,
  kMalformedIdx,
  kDimMismatch,
  kMalformedFile,
};

std::string_view to_string(ErrorCode code);

/// Every recoverable failure in the library is reported as a DfxError
/// carrying a machine-checkable code.
class DfxError : public std::runtime_error {
 public:
  DfxError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonFiniteInput: return "NonFiniteInput";
    case ErrorCode::kInvalidBitWidth: return "InvalidBitWidth";
    case ErrorCode::kExponentOverflow: return "ExponentOverflow";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kAccumulatorOverflow: return "AccumulatorOverflow";
    case ErrorCode::kDegenerateBatch: return "DegenerateBatch";
    case ErrorCode::kCacheMismatch: return "CacheMismatch";
    case ErrorCode::kNonPositiveInput: return "NonPositiveInput";
    case ErrorCode::kLearningRateTooLarge: return "LearningRateTooLarge";
    case ErrorCode::kDatasetNotFound: return "DatasetNotFound";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kUnknownSuite: return "UnknownSuite";
    case ErrorCode::kMalformedIdx: return "MalformedIdx";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kMalformedFile: return "MalformedFile";
  }
  return "Unknown";
}

}  // namespace dfx
