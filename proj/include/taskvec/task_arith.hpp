// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Weight-space algebra over checkpoints. A task vector is the per-tensor
// difference between a fine-tuned checkpoint and its base; vectors can be
// added, negated, scaled, applied to a base, merged with per-vector
// coefficients, and injected into an already fine-tuned model.
//
// All arithmetic is F32: F16/BF16 operands are widened on entry. Binary
// operations require equal tensor-name sets and equal shapes per name unless
// MatchMode::kIntersect is requested, in which case names present on only one
// side are skipped and reported.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "taskvec/checkpoint.hpp"

namespace taskvec {

struct VectorSource {
  std::string base_id;
  std::string task_id;
  friend bool operator==(const VectorSource&, const VectorSource&) = default;
};

class TaskVector {
 public:
  TaskVector() = default;
  // Every tensor must be F32; throws InvalidTensor otherwise.
  TaskVector(Checkpoint::TensorMap deltas, VectorSource source);

  const Checkpoint::TensorMap& deltas() const { return deltas_; }
  const VectorSource& source() const { return source_; }
  std::size_t numel() const;

  // Serialized form: a checkpoint with metadata role=task_vector, base_id, task_id.
  Checkpoint to_checkpoint() const;
  // Throws InvalidTensor unless metadata role is "task_vector"; widens half payloads.
  static TaskVector from_checkpoint(const Checkpoint& ckpt);

  friend bool operator==(const TaskVector&, const TaskVector&) = default;

 private:
  Checkpoint::TensorMap deltas_;
  VectorSource source_;
};

struct WeightedVector {
  TaskVector vector;
  double coefficient = 1.0;
};

enum class MatchMode { kStrict, kIntersect };

struct ArithOptions {
  MatchMode mode = MatchMode::kStrict;
  // Receives names skipped in kIntersect mode, sorted.
  std::vector<std::string>* skipped = nullptr;
};

// Metadata key holding the identity used for base_id / task_id.
inline constexpr const char* kIdKey = "id";

TaskVector diff(const Checkpoint& task, const Checkpoint& base, const ArithOptions& opts = {});
TaskVector add(const TaskVector& a, const TaskVector& b, const ArithOptions& opts = {});
TaskVector negate(const TaskVector& tv);
// Throws NonFiniteCoefficient.
TaskVector scale(const TaskVector& tv, double lambda);

struct ApplyOptions {
  ArithOptions match;
  // Narrow the result to this dtype; F32 when unset.
  std::optional<DType> out_dtype;
};

Checkpoint apply(const Checkpoint& base, const TaskVector& tv, const ApplyOptions& opts = {});

// base + sum_i lambda_i * delta_i. Per element the terms are folded left to
// right in the given order; zero coefficients contribute nothing, and an
// empty list returns `base` unchanged.
Checkpoint merge(const Checkpoint& base, const std::vector<WeightedVector>& parts, const ApplyOptions& opts = {});

// sft + lambda * worst; identical to merge(sft, {{worst, lambda}}).
Checkpoint inject(const Checkpoint& sft, const TaskVector& worst, double lambda, const ApplyOptions& opts = {});

// Diagnostics; not used by the sweep protocols.
double vector_norm(const TaskVector& tv);
// Throws ZeroVector if either operand has zero norm.
double vector_cosine(const TaskVector& a, const TaskVector& b, const ArithOptions& opts = {});

}  // namespace taskvec
