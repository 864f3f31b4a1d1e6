// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/task_arith.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "taskvec/error.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/kernels.hpp"

namespace taskvec {

namespace {

constexpr const char* kEditKey = "edit";

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += ", ";
    out += "'" + s + "'";
  }
  return out;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Common names of two tensor maps, after validating names and shapes.
std::vector<std::string> align(const Checkpoint::TensorMap& a, const Checkpoint::TensorMap& b,
                               const ArithOptions& opts, const char* a_label, const char* b_label) {
  std::vector<std::string> common, only_a, only_b;
  for (const auto& [name, _] : a) (b.contains(name) ? common : only_a).push_back(name);
  for (const auto& [name, _] : b) {
    if (!a.contains(name)) only_b.push_back(name);
  }
  if (opts.mode == MatchMode::kStrict && (!only_a.empty() || !only_b.empty())) {
    std::string msg = "tensor name sets differ";
    if (!only_a.empty()) msg += "; only in " + std::string(a_label) + ": " + join(only_a);
    if (!only_b.empty()) msg += "; only in " + std::string(b_label) + ": " + join(only_b);
    throw Error(ErrorCode::kNameSetMismatch, msg);
  }
  std::vector<std::string> bad;
  for (const auto& name : common) {
    if (a.at(name).shape() != b.at(name).shape()) {
      bad.push_back("'" + name + "': " + shape_str(a.at(name).shape()) + " vs " + shape_str(b.at(name).shape()));
    }
  }
  if (!bad.empty()) {
    std::string msg = "shape mismatch for tensor ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? ", " : "") + bad[i];
    throw Error(ErrorCode::kShapeMismatch, msg);
  }
  if (opts.skipped != nullptr) {
    std::vector<std::string> skipped = only_a;
    skipped.insert(skipped.end(), only_b.begin(), only_b.end());
    std::sort(skipped.begin(), skipped.end());
    *opts.skipped = std::move(skipped);
  }
  return common;
}

Tensor widen(const Tensor& t) { return t.dtype() == DType::kF32 ? t : t.cast(DType::kF32); }

void check_finite(double lambda) {
  if (!std::isfinite(lambda)) {
    throw Error(ErrorCode::kNonFiniteCoefficient, "coefficient " + format_double(lambda) + " is not finite");
  }
}

std::string id_of(const Checkpoint& ckpt) {
  auto it = ckpt.metadata().find(kIdKey);
  return it == ckpt.metadata().end() ? std::string() : it->second;
}

void append_edit(Metadata& meta, const std::string& entry) {
  auto& slot = meta[kEditKey];
  slot = slot.empty() ? entry : slot + "; " + entry;
}

Checkpoint finish(Checkpoint out, const ApplyOptions& opts) {
  if (!opts.out_dtype || *opts.out_dtype == DType::kF32) return out;
  for (const auto& name : tensor_names(out)) out.set(name, out.at(name).cast(*opts.out_dtype));
  return out;
}

}  // namespace

TaskVector::TaskVector(Checkpoint::TensorMap deltas, VectorSource source)
    : deltas_(std::move(deltas)), source_(std::move(source)) {
  for (const auto& [name, t] : deltas_) {
    if (t.dtype() != DType::kF32) throw Error(ErrorCode::kInvalidTensor, "task vector tensor '" + name + "' is not F32");
  }
}

std::size_t TaskVector::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : deltas_) n += t.numel();
  return n;
}

Checkpoint TaskVector::to_checkpoint() const {
  Checkpoint ckpt;
  for (const auto& [name, t] : deltas_) ckpt.insert(name, t);
  ckpt.metadata() = {{"role", "task_vector"}, {"base_id", source_.base_id}, {"task_id", source_.task_id}};
  return ckpt;
}

TaskVector TaskVector::from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.metadata();
  auto role = meta.find("role");
  if (role == meta.end() || role->second != "task_vector") {
    throw Error(ErrorCode::kInvalidTensor, "checkpoint is not a task vector (metadata role != task_vector)");
  }
  Checkpoint::TensorMap deltas;
  for (const auto& [name, t] : ckpt.tensors()) deltas.emplace(name, widen(t));
  VectorSource src;
  if (auto it = meta.find("base_id"); it != meta.end()) src.base_id = it->second;
  if (auto it = meta.find("task_id"); it != meta.end()) src.task_id = it->second;
  return TaskVector(std::move(deltas), std::move(src));
}

TaskVector diff(const Checkpoint& task, const Checkpoint& base, const ArithOptions& opts) {
  const auto names = align(task.tensors(), base.tensors(), opts, "task", "base");
  Checkpoint::TensorMap out;
  for (const auto& name : names) {
    const Tensor t = widen(task.at(name));
    const Tensor b = widen(base.at(name));
    Tensor d = t;
    kernels::subtract(t.f32(), b.f32(), d.f32_mut());
    out.emplace(name, std::move(d));
  }
  return TaskVector(std::move(out), {id_of(base), id_of(task)});
}

TaskVector add(const TaskVector& a, const TaskVector& b, const ArithOptions& opts) {
  const auto names = align(a.deltas(), b.deltas(), opts, "left", "right");
  Checkpoint::TensorMap out;
  for (const auto& name : names) {
    Tensor s = a.deltas().at(name);
    kernels::add(a.deltas().at(name).f32(), b.deltas().at(name).f32(), s.f32_mut());
    out.emplace(name, std::move(s));
  }
  VectorSource src{a.source().base_id, a.source().task_id + "+" + b.source().task_id};
  return TaskVector(std::move(out), std::move(src));
}

TaskVector negate(const TaskVector& tv) {
  Checkpoint::TensorMap out;
  for (const auto& [name, t] : tv.deltas()) {
    Tensor n = t;
    kernels::negate(t.f32(), n.f32_mut());
    out.emplace(name, std::move(n));
  }
  return TaskVector(std::move(out), {tv.source().base_id, "-(" + tv.source().task_id + ")"});
}

TaskVector scale(const TaskVector& tv, double lambda) {
  check_finite(lambda);
  Checkpoint::TensorMap out;
  for (const auto& [name, t] : tv.deltas()) {
    Tensor s = t;
    kernels::scale(t.f32(), lambda, s.f32_mut());
    out.emplace(name, std::move(s));
  }
  return TaskVector(std::move(out), {tv.source().base_id, format_double(lambda) + "*(" + tv.source().task_id + ")"});
}

Checkpoint apply(const Checkpoint& base, const TaskVector& tv, const ApplyOptions& opts) {
  const auto names = align(base.tensors(), tv.deltas(), opts.match, "base", "vector");
  Checkpoint out;
  for (const auto& [name, t] : base.tensors()) out.insert(name, widen(t));
  for (const auto& name : names) {
    Tensor acc = out.at(name);
    kernels::accumulate_scaled(acc.f32_mut(), tv.deltas().at(name).f32(), 1.0);
    out.set(name, std::move(acc));
  }
  out.metadata() = base.metadata();
  append_edit(out.metadata(), "apply(" + tv.source().task_id + ")");
  return finish(std::move(out), opts);
}

Checkpoint merge(const Checkpoint& base, const std::vector<WeightedVector>& parts, const ApplyOptions& opts) {
  if (parts.empty()) return base;
  // Validate everything before producing any output.
  std::vector<std::vector<std::string>> names;
  std::vector<std::string> skipped_all;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    check_finite(parts[i].coefficient);
    std::vector<std::string> skipped;
    ArithOptions match = opts.match;
    match.skipped = &skipped;
    names.push_back(align(base.tensors(), parts[i].vector.deltas(), match, "base",
                          ("vector #" + std::to_string(i)).c_str()));
    skipped_all.insert(skipped_all.end(), skipped.begin(), skipped.end());
  }
  if (opts.match.skipped != nullptr) {
    std::sort(skipped_all.begin(), skipped_all.end());
    skipped_all.erase(std::unique(skipped_all.begin(), skipped_all.end()), skipped_all.end());
    *opts.match.skipped = std::move(skipped_all);
  }

  Checkpoint out;
  for (const auto& [name, t] : base.tensors()) out.insert(name, widen(t));
  std::string provenance;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double lambda = parts[i].coefficient;
    provenance += (i ? " + " : "") + format_double(lambda) + "*" + parts[i].vector.source().task_id;
    if (lambda == 0.0) continue;
    for (const auto& name : names[i]) {
      Tensor acc = out.at(name);
      kernels::accumulate_scaled(acc.f32_mut(), parts[i].vector.deltas().at(name).f32(), lambda);
      out.set(name, std::move(acc));
    }
  }
  out.metadata() = base.metadata();
  append_edit(out.metadata(), "merge(" + provenance + ")");
  return finish(std::move(out), opts);
}

Checkpoint inject(const Checkpoint& sft, const TaskVector& worst, double lambda, const ApplyOptions& opts) {
  return merge(sft, {WeightedVector{worst, lambda}}, opts);
}

double vector_norm(const TaskVector& tv) {
  double total = 0.0;
  for (const auto& [_, t] : tv.deltas()) total += kernels::sum_squares(t.f32());
  return std::sqrt(total);
}

double vector_cosine(const TaskVector& a, const TaskVector& b, const ArithOptions& opts) {
  const auto names = align(a.deltas(), b.deltas(), opts, "left", "right");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (const auto& name : names) {
    const auto x = a.deltas().at(name).f32();
    const auto y = b.deltas().at(name).f32();
    ab += kernels::dot(x, y);
    aa += kernels::sum_squares(x);
    bb += kernels::sum_squares(y);
  }
  if (aa == 0.0 || bb == 0.0) throw Error(ErrorCode::kZeroVector, "cosine of a zero task vector is undefined");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

}  // namespace taskvec
