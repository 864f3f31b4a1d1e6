// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/kernels.hpp"

#include <cstdlib>
#include <string>

#include "taskvec/error.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace taskvec::kernels {

namespace {

// Below this many elements the OpenMP versions stay on one thread.
constexpr std::size_t kParallelMin = std::size_t{1} << 15;

void check_same(std::size_t a, std::size_t b) {
  if (a != b) throw Error(ErrorCode::kShapeMismatch, "kernel operands differ in length");
}

double block_sum_squares(const float* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(p[i]) * p[i];
  return s;
}

double block_dot(const float* a, const float* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

std::size_t num_blocks(std::size_t n) { return (n + kReduceBlock - 1) / kReduceBlock; }

}  // namespace

GroupCounts& GroupCounts::operator+=(const GroupCounts& o) {
  n += o.n;
  predicted_positive += o.predicted_positive;
  correct += o.correct;
  label_positive += o.label_positive;
  true_positive += o.true_positive;
  label_negative += o.label_negative;
  false_positive += o.false_positive;
  return *this;
}

GroupCounts operator-(GroupCounts a, const GroupCounts& b) {
  a.n -= b.n;
  a.predicted_positive -= b.predicted_positive;
  a.correct -= b.correct;
  a.label_positive -= b.label_positive;
  a.true_positive -= b.true_positive;
  a.label_negative -= b.label_negative;
  a.false_positive -= b.false_positive;
  return a;
}

namespace serial {

void subtract(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
}

void add(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
}

void negate(std::span<const float> a, std::span<float> out) {
  check_same(a.size(), out.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = -a[i];
}

void scale(std::span<const float> a, double lambda, std::span<float> out) {
  check_same(a.size(), out.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = scaled_term(lambda, a[i]);
}

void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double lambda) {
  check_same(acc.size(), delta.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const float term = scaled_term(lambda, delta[i]);
    if (term != 0.0f) acc[i] += term;
  }
}

double sum_squares(std::span<const float> a) {
  double total = 0.0;
  for (std::size_t b = 0; b < num_blocks(a.size()); ++b) {
    const std::size_t lo = b * kReduceBlock;
    total += block_sum_squares(a.data() + lo, std::min(kReduceBlock, a.size() - lo));
  }
  return total;
}

double dot(std::span<const float> a, std::span<const float> b) {
  check_same(a.size(), b.size());
  double total = 0.0;
  for (std::size_t k = 0; k < num_blocks(a.size()); ++k) {
    const std::size_t lo = k * kReduceBlock;
    total += block_dot(a.data() + lo, b.data() + lo, std::min(kReduceBlock, a.size() - lo));
  }
  return total;
}

std::vector<GroupCounts> count_groups(std::span<const uint32_t> group, std::span<const uint8_t> y_true,
                                      std::span<const uint8_t> y_pred, std::size_t n_groups) {
  check_same(group.size(), y_true.size());
  check_same(group.size(), y_pred.size());
  std::vector<GroupCounts> counts(n_groups);
  for (std::size_t i = 0; i < group.size(); ++i) {
    GroupCounts& c = counts.at(group[i]);
    const bool pred = y_pred[i] != 0;
    const bool label = y_true[i] != 0;
    ++c.n;
    c.predicted_positive += pred;
    c.correct += pred == label;
    if (label) {
      ++c.label_positive;
      c.true_positive += pred;
    } else {
      ++c.label_negative;
      c.false_positive += pred;
    }
  }
  return counts;
}

}  // namespace serial

namespace omp {

void subtract(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  const auto n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for simd if (a.size() >= kParallelMin)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void add(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  const auto n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for simd if (a.size() >= kParallelMin)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void negate(std::span<const float> a, std::span<float> out) {
  check_same(a.size(), out.size());
  const auto n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for simd if (a.size() >= kParallelMin)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = -a[i];
}

void scale(std::span<const float> a, double lambda, std::span<float> out) {
  check_same(a.size(), out.size());
  const auto n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (a.size() >= kParallelMin)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = scaled_term(lambda, a[i]);
}

void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double lambda) {
  check_same(acc.size(), delta.size());
  const auto n = static_cast<std::ptrdiff_t>(acc.size());
#pragma omp parallel for if (acc.size() >= kParallelMin)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const float term = scaled_term(lambda, delta[i]);
    if (term != 0.0f) acc[i] += term;
  }
}

double sum_squares(std::span<const float> a) {
  const std::size_t nb = num_blocks(a.size());
  std::vector<double> partial(nb);
#pragma omp parallel for if (a.size() >= kParallelMin)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kReduceBlock;
    partial[b] = block_sum_squares(a.data() + lo, std::min(kReduceBlock, a.size() - lo));
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

double dot(std::span<const float> a, std::span<const float> b) {
  check_same(a.size(), b.size());
  const std::size_t nb = num_blocks(a.size());
  std::vector<double> partial(nb);
#pragma omp parallel for if (a.size() >= kParallelMin)
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(nb); ++k) {
    const std::size_t lo = static_cast<std::size_t>(k) * kReduceBlock;
    partial[k] = block_dot(a.data() + lo, b.data() + lo, std::min(kReduceBlock, a.size() - lo));
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

std::vector<GroupCounts> count_groups(std::span<const uint32_t> group, std::span<const uint8_t> y_true,
                                      std::span<const uint8_t> y_pred, std::size_t n_groups) {
  check_same(group.size(), y_true.size());
  check_same(group.size(), y_pred.size());
  for (uint32_t g : group) {
    if (g >= n_groups) throw Error(ErrorCode::kInvalidArgument, "group index out of range");
  }
  // Integer counts: the merge order does not affect the result.
  const std::size_t nb = num_blocks(group.size());
  std::vector<std::vector<GroupCounts>> partial(nb);
#pragma omp parallel for if (group.size() >= kParallelMin)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kReduceBlock;
    const std::size_t len = std::min(kReduceBlock, group.size() - lo);
    partial[b] = serial::count_groups(group.subspan(lo, len), y_true.subspan(lo, len), y_pred.subspan(lo, len),
                                      n_groups);
  }
  std::vector<GroupCounts> counts(n_groups);
  for (const auto& p : partial) {
    for (std::size_t g = 0; g < n_groups; ++g) counts[g] += p[g];
  }
  return counts;
}

}  // namespace omp

#ifdef _OPENMP
#define TASKVEC_IMPL omp
#else
#define TASKVEC_IMPL serial
#endif

void subtract(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  TASKVEC_IMPL::subtract(a, b, out);
}
void add(std::span<const float> a, std::span<const float> b, std::span<float> out) { TASKVEC_IMPL::add(a, b, out); }
void negate(std::span<const float> a, std::span<float> out) { TASKVEC_IMPL::negate(a, out); }
void scale(std::span<const float> a, double lambda, std::span<float> out) { TASKVEC_IMPL::scale(a, lambda, out); }
void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double lambda) {
  TASKVEC_IMPL::accumulate_scaled(acc, delta, lambda);
}
double sum_squares(std::span<const float> a) { return TASKVEC_IMPL::sum_squares(a); }
double dot(std::span<const float> a, std::span<const float> b) { return TASKVEC_IMPL::dot(a, b); }
std::vector<GroupCounts> count_groups(std::span<const uint32_t> group, std::span<const uint8_t> y_true,
                                      std::span<const uint8_t> y_pred, std::size_t n_groups) {
  return TASKVEC_IMPL::count_groups(group, y_true, y_pred, n_groups);
}

#undef TASKVEC_IMPL

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("TASKVEC_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) omp_set_num_threads(n);
    } catch (const std::exception&) {
      // Unparseable values leave the OpenMP default in place.
    }
  }
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int set_threads(int n) {
  if (n <= 0) throw Error(ErrorCode::kInvalidArgument, "thread count must be positive");
#ifdef _OPENMP
  omp_set_num_threads(n);
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace taskvec::kernels
