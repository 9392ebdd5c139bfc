#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace frag4d {

enum class ErrorCode {
  // io
  kIoFailure,
  kBadMagic,
  kTruncatedPayload,
  kTrailingData,
  kDimOverflow,
  kBadShape,
  kSchemaMismatch,
  kNonUnitRotation,
  kInvalidAttribute,
  // similarity
  kDimMismatch,
  kZeroToken,
  kEmptyHeatmap,
  kTooFewTokens,
  kNotPsd,
  kEigenFailure,
  // hierarchy
  kMissingExternalFrames,
  kAdapterDimMismatch,
  kTooFewFrames,
  kInvalidParams,
  // scene
  kDegenerateQuaternion,
  kEmptyCloud,
  kCloudTooSmall,
  kCardinalityMismatch,
  kCoincidentPoints,
  // renderer
  kInvalidCamera,
  kAllPointsCulled,
  kStaleForwardState,
  // optimize
  kResolutionMismatch,
  kGraphCloudMismatch,
  kTooFewViews,
  kEmptyForeground,
  kDiverged,
  kInvalidWeights,
  // merging
  kMissingOverlapSupervision,
  // smoothing
  kInvalidDepth,
  kSequenceMismatch,
  // synth
  kBadSpec,
  // cli
  kConfigError,
  kMissingArtifact,
};

std::string_view to_string(ErrorCode code);

/// Process exit status for an error surfaced at the CLI boundary:
/// 2 config, 3 numerical divergence, 4 missing external artifacts, 1 otherwise.
int exit_status(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace frag4d
