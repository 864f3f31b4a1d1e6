// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/error.hpp"

namespace taskvec {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMalformedHeader: return "MalformedHeader";
    case ErrorCode::kOverlappingOffsets: return "OverlappingOffsets";
    case ErrorCode::kTruncatedData: return "TruncatedData";
    case ErrorCode::kUnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kInvalidTensor: return "InvalidTensor";
    case ErrorCode::kInvalidName: return "InvalidName";
    case ErrorCode::kDuplicateName: return "DuplicateName";
    case ErrorCode::kNameSetMismatch: return "NameSetMismatch";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFiniteCoefficient: return "NonFiniteCoefficient";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kEmptyGroup: return "EmptyGroup";
    case ErrorCode::kInsufficientGroups: return "InsufficientGroups";
    case ErrorCode::kUndefinedRate: return "UndefinedRate";
    case ErrorCode::kMissingAttribute: return "MissingAttribute";
    case ErrorCode::kInvalidRecord: return "InvalidRecord";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kDivergedTraining: return "DivergedTraining";
    case ErrorCode::kIncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace taskvec
