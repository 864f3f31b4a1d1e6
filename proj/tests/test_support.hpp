// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Random generators shared by the unit and acceptance suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "taskvec/checkpoint.hpp"
#include "taskvec/half.hpp"

namespace taskvec::testing {

inline std::string random_name(std::mt19937_64& rng) {
  static constexpr char kAlpha[] = "abcdefghijklmnopqrstuvwxyz._0123456789";
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_int_distribution<int> ch(0, sizeof(kAlpha) - 2);
  std::string s;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) s.push_back(kAlpha[ch(rng)]);
  return s;
}

inline Shape random_shape(std::mt19937_64& rng, int max_rank = 3, int max_extent = 5) {
  std::uniform_int_distribution<int> rank(0, max_rank);
  std::uniform_int_distribution<int> ext(0, max_extent);
  Shape s(rank(rng));
  for (auto& d : s) d = ext(rng);
  return s;
}

// Payload of arbitrary bit patterns, including NaNs, infinities and -0.
inline Tensor random_tensor(std::mt19937_64& rng, DType dtype, Shape shape) {
  std::vector<std::byte> bytes(shape_numel(shape) * dtype_size(dtype));
  for (auto& b : bytes) b = static_cast<std::byte>(rng() & 0xFF);
  return Tensor(dtype, std::move(shape), std::move(bytes));
}

inline Checkpoint random_checkpoint(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 6);
  std::uniform_int_distribution<int> dt(0, 2);
  Checkpoint ckpt;
  const int n = count(rng);
  while (static_cast<int>(ckpt.size()) < n) {
    std::string name = random_name(rng);
    if (ckpt.contains(name)) continue;
    ckpt.insert(name, random_tensor(rng, static_cast<DType>(dt(rng)), random_shape(rng)));
  }
  const int m = count(rng) / 2;
  for (int i = 0; i < m; ++i) ckpt.metadata()[random_name(rng)] = random_name(rng);
  return ckpt;
}

// F32 checkpoint with finite values drawn from N(0, sigma) on a fixed layout.
inline Checkpoint random_f32_checkpoint(std::mt19937_64& rng, const std::vector<std::pair<std::string, Shape>>& layout,
                                        double sigma = 1.0) {
  std::normal_distribution<double> normal(0.0, sigma);
  Checkpoint ckpt;
  for (const auto& [name, shape] : layout) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(normal(rng));
    ckpt.insert(name, Tensor::from_f32(shape, v));
  }
  return ckpt;
}

inline std::vector<std::pair<std::string, Shape>> random_layout(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(1, 5);
  std::vector<std::pair<std::string, Shape>> layout;
  std::vector<std::string> used;
  const int n = count(rng);
  while (static_cast<int>(layout.size()) < n) {
    std::string name = random_name(rng);
    if (std::find(used.begin(), used.end(), name) != used.end()) continue;
    used.push_back(name);
    layout.emplace_back(name, random_shape(rng, 3, 6));
  }
  return layout;
}

inline bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

// |x - y| <= tol * max(|x|, |y|, ref): relative error measured against the
// magnitude of the operands that produced the element.
inline bool rel_close(double x, double y, double ref, double tol = 1e-6) {
  return std::fabs(x - y) <= tol * std::max({std::fabs(x), std::fabs(y), std::fabs(ref)});
}

}  // namespace taskvec::testing
