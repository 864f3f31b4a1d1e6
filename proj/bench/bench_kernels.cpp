// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Times every kernel in its serial and OpenMP versions and checks that the
// two agree bitwise.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "taskvec/kernels.hpp"

namespace k = taskvec::kernels;

namespace {

double median_ms(int reps, const std::function<void()>& body) {
  std::vector<double> t;
  body();  // warm-up
  for (int r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    body();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

bool same_bits(const void* a, const void* b, std::size_t bytes) { return std::memcmp(a, b, bytes) == 0; }

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 1 << 24;
  int reps = 7;
  int threads = 0;
  CLI::App app{"Serial versus OpenMP kernel timings", "bench_kernels"};
  app.add_option("-n,--elements", n, "Elements per tensor")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("-r,--reps", reps, "Timed repetitions (median reported)")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("-t,--threads", threads, "OpenMP threads (default: TASKVEC_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const int used = threads > 0 ? k::set_threads(threads) : k::configure_threads_from_env();

  std::mt19937_64 rng(7);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> a(n), b(n), out_s(n), out_o(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = normal(rng);
    b[i] = normal(rng);
  }
  std::vector<uint32_t> group(n);
  std::vector<uint8_t> y_true(n), y_pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    group[i] = static_cast<uint32_t>(rng() % 8);
    y_true[i] = static_cast<uint8_t>(rng() & 1);
    y_pred[i] = static_cast<uint8_t>(rng() & 1);
  }

  std::printf("elements=%zu reps=%d openmp=%s threads=%d\n", n, reps, k::openmp_enabled() ? "on" : "off", used);
  std::printf("%-18s %12s %12s %8s %s\n", "kernel", "serial_ms", "omp_ms", "speedup", "match");
  bool all_match = true;
  auto report = [&](const char* name, double s, double o, bool match) {
    all_match = all_match && match;
    std::printf("%-18s %12.3f %12.3f %8.2f %s\n", name, s, o, s / o, match ? "bitwise" : "MISMATCH");
  };
  const std::size_t bytes = n * sizeof(float);

  auto elementwise = [&](const char* name, auto serial_fn, auto omp_fn) {
    const double s = median_ms(reps, [&] { serial_fn(out_s); });
    const double o = median_ms(reps, [&] { omp_fn(out_o); });
    report(name, s, o, same_bits(out_s.data(), out_o.data(), bytes));
  };
  elementwise("subtract", [&](std::vector<float>& o) { k::serial::subtract(a, b, o); },
              [&](std::vector<float>& o) { k::omp::subtract(a, b, o); });
  elementwise("add", [&](std::vector<float>& o) { k::serial::add(a, b, o); },
              [&](std::vector<float>& o) { k::omp::add(a, b, o); });
  elementwise("negate", [&](std::vector<float>& o) { k::serial::negate(a, o); },
              [&](std::vector<float>& o) { k::omp::negate(a, o); });
  elementwise("scale", [&](std::vector<float>& o) { k::serial::scale(a, 0.37, o); },
              [&](std::vector<float>& o) { k::omp::scale(a, 0.37, o); });
  {
    out_s = a;
    out_o = a;
    const double s = median_ms(reps, [&] { k::serial::accumulate_scaled(out_s, b, 1e-3); });
    const double o = median_ms(reps, [&] { k::omp::accumulate_scaled(out_o, b, 1e-3); });
    report("accumulate_scaled", s, o, same_bits(out_s.data(), out_o.data(), bytes));
  }
  {
    double rs = 0, ro = 0;
    const double s = median_ms(reps, [&] { rs = k::serial::sum_squares(a); });
    const double o = median_ms(reps, [&] { ro = k::omp::sum_squares(a); });
    report("sum_squares", s, o, same_bits(&rs, &ro, sizeof(double)));
    const double s2 = median_ms(reps, [&] { rs = k::serial::dot(a, b); });
    const double o2 = median_ms(reps, [&] { ro = k::omp::dot(a, b); });
    report("dot", s2, o2, same_bits(&rs, &ro, sizeof(double)));
  }
  {
    std::vector<k::GroupCounts> cs, co;
    const double s = median_ms(reps, [&] { cs = k::serial::count_groups(group, y_true, y_pred, 8); });
    const double o = median_ms(reps, [&] { co = k::omp::count_groups(group, y_true, y_pred, 8); });
    report("count_groups", s, o, cs == co);
  }
  return all_match ? 0 : 1;
}
