// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace taskvec {

enum class ErrorCode {
  kMalformedHeader,
  kOverlappingOffsets,
  kTruncatedData,
  kUnsupportedDtype,
  kIoFailure,
  kInvalidTensor,
  kInvalidName,
  kDuplicateName,
  kNameSetMismatch,
  kShapeMismatch,
  kNonFiniteCoefficient,
  kZeroVector,
  kEmptyGroup,
  kInsufficientGroups,
  kUndefinedRate,
  kMissingAttribute,
  kInvalidRecord,
  kInvalidSpec,
  kDivergedTraining,
  kIncompatibleCheckpoint,
  kInvalidArgument,
  kInvalidConfig,
};

// Stable identifier printed by the CLI, e.g. "ShapeMismatch".
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace taskvec
