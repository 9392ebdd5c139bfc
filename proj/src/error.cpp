#include "frag4d/error.hpp"

namespace frag4d {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kTruncatedPayload: return "TruncatedPayload";
    case ErrorCode::kTrailingData: return "TrailingData";
    case ErrorCode::kDimOverflow: return "DimOverflow";
    case ErrorCode::kBadShape: return "BadShape";
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kNonUnitRotation: return "NonUnitRotation";
    case ErrorCode::kInvalidAttribute: return "InvalidAttribute";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kZeroToken: return "ZeroToken";
    case ErrorCode::kEmptyHeatmap: return "EmptyHeatmap";
    case ErrorCode::kTooFewTokens: return "TooFewTokens";
    case ErrorCode::kNotPsd: return "NotPsd";
    case ErrorCode::kEigenFailure: return "EigenFailure";
    case ErrorCode::kMissingExternalFrames: return "MissingExternalFrames";
    case ErrorCode::kAdapterDimMismatch: return "AdapterDimMismatch";
    case ErrorCode::kTooFewFrames: return "TooFewFrames";
    case ErrorCode::kInvalidParams: return "InvalidParams";
    case ErrorCode::kDegenerateQuaternion: return "DegenerateQuaternion";
    case ErrorCode::kEmptyCloud: return "EmptyCloud";
    case ErrorCode::kCloudTooSmall: return "CloudTooSmall";
    case ErrorCode::kCardinalityMismatch: return "CardinalityMismatch";
    case ErrorCode::kCoincidentPoints: return "CoincidentPoints";
    case ErrorCode::kInvalidCamera: return "InvalidCamera";
    case ErrorCode::kAllPointsCulled: return "AllPointsCulled";
    case ErrorCode::kStaleForwardState: return "StaleForwardState";
    case ErrorCode::kResolutionMismatch: return "ResolutionMismatch";
    case ErrorCode::kGraphCloudMismatch: return "GraphCloudMismatch";
    case ErrorCode::kTooFewViews: return "TooFewViews";
    case ErrorCode::kEmptyForeground: return "EmptyForeground";
    case ErrorCode::kDiverged: return "Diverged";
    case ErrorCode::kInvalidWeights: return "InvalidWeights";
    case ErrorCode::kMissingOverlapSupervision: return "MissingOverlapSupervision";
    case ErrorCode::kInvalidDepth: return "InvalidDepth";
    case ErrorCode::kSequenceMismatch: return "SequenceMismatch";
    case ErrorCode::kBadSpec: return "BadSpec";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kMissingArtifact: return "MissingArtifact";
  }
  return "Unknown";
}

int exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigError:
    case ErrorCode::kInvalidParams:
    case ErrorCode::kInvalidWeights:
    case ErrorCode::kBadSpec:
      return 2;
    case ErrorCode::kDiverged:
      return 3;
    case ErrorCode::kMissingExternalFrames:
    case ErrorCode::kMissingArtifact:
      return 4;
    default:
      return 1;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code) {}

void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace frag4d
