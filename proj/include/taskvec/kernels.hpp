// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Data-parallel inner loops. Each kernel has a serial reference in
// kernels::serial and an OpenMP version in kernels::omp; the unqualified
// kernels:: names dispatch to the OpenMP version when it is compiled in.
// Both versions produce bitwise-identical results for any thread count:
// elementwise kernels have no cross-element dependence, and reductions sum
// fixed-size blocks then combine the block partials in index order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace taskvec::kernels {

// Reduction block length; partial sums are formed per block.
inline constexpr std::size_t kReduceBlock = 4096;

// lambda * d rounded to F32; the shared definition of a scaled element.
inline float scaled_term(double lambda, float d) { return static_cast<float>(lambda * static_cast<double>(d)); }

struct GroupCounts {
  uint64_t n = 0;
  uint64_t predicted_positive = 0;
  uint64_t correct = 0;
  uint64_t label_positive = 0;   // Y = 1
  uint64_t true_positive = 0;    // Y = 1, prediction 1
  uint64_t label_negative = 0;   // Y = 0
  uint64_t false_positive = 0;   // Y = 0, prediction 1

  GroupCounts& operator+=(const GroupCounts& o);
  friend GroupCounts operator-(GroupCounts a, const GroupCounts& b);
  friend bool operator==(const GroupCounts&, const GroupCounts&) = default;
};

#define TASKVEC_KERNEL_DECLS                                                                        \
  void subtract(std::span<const float> a, std::span<const float> b, std::span<float> out);          \
  void add(std::span<const float> a, std::span<const float> b, std::span<float> out);               \
  void negate(std::span<const float> a, std::span<float> out);                                      \
  void scale(std::span<const float> a, double lambda, std::span<float> out);                        \
  /* acc[i] += scaled_term(lambda, delta[i]), skipping terms that are exactly zero. */              \
  void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double lambda);        \
  double sum_squares(std::span<const float> a);                                                     \
  double dot(std::span<const float> a, std::span<const float> b);                                   \
  /* group[i] < n_groups; labels and predictions are 0/1. */                                        \
  std::vector<GroupCounts> count_groups(std::span<const uint32_t> group, std::span<const uint8_t> y_true, \
                                        std::span<const uint8_t> y_pred, std::size_t n_groups);

namespace serial {
TASKVEC_KERNEL_DECLS
}  // namespace serial

namespace omp {
TASKVEC_KERNEL_DECLS
}  // namespace omp

TASKVEC_KERNEL_DECLS

#undef TASKVEC_KERNEL_DECLS

// True when the OpenMP versions are compiled in.
bool openmp_enabled();
// Applies TASKVEC_THREADS from the environment when set; returns the thread
// count in effect (1 without OpenMP).
int configure_threads_from_env();
// n > 0; returns the thread count in effect.
int set_threads(int n);

}  // namespace taskvec::kernels
