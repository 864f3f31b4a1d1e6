// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Coefficient sweeps over merged and injected checkpoints, across seeds.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskvec/checkpoint.hpp"
#include "taskvec/fair_metrics.hpp"
#include "taskvec/task_arith.hpp"
#include "taskvec/toy_lab.hpp"

namespace taskvec::sweep {

// 0.0, 0.1, ..., 1.0 and 0.0, 0.2, ..., 1.0, each value k / 10 or k / 5.
std::vector<double> default_merge_grid();
std::vector<double> default_inject_grid();

struct SweepConfig {
  std::vector<double> grid;  // finite, strictly increasing; run_merge and run_inject fill an empty grid with the mode default
  std::vector<uint64_t> seeds{13, 14, 15};
  std::string attribute = "gender";
  // "<split>:<metric>", metric one of macro_accuracy (maximized) or dpd, eod,
  // accuracy_parity_gap (minimized).
  std::string criterion = "train:macro_accuracy";
  std::string plot_split = "test";

  // Throws InvalidConfig.
  void validate() const;
};

using EvalData = std::map<std::string, std::vector<toy::Example>>;  // split name -> examples
using Reports = std::map<std::string, GroupReport>;                 // split name -> report

// Per-seed inputs: the checkpoint the vectors are added to and the data the
// edited models are scored on.
struct Arm {
  uint64_t seed = 0;
  Checkpoint anchor;
  std::vector<TaskVector> vectors;
  EvalData eval;
};

struct Row {
  double lambda = 0.0;
  uint64_t seed = 0;
  Reports reports;
};

struct Baseline {
  std::string name;
  uint64_t seed = 0;
  Reports reports;
};

struct Stat {
  double mean = 0.0;
  double stderr_ = 0.0;  // sample sd / sqrt(n); 0 when n == 1
  std::size_t n = 0;
};

// group is a subgroup name or "__overall__".
struct Aggregate {
  double lambda = 0.0;
  std::string split, group, metric;
  Stat stat;
};

struct SweepResult {
  std::string mode;  // "merge" or "inject"
  SweepConfig config;
  std::vector<Row> rows;  // grid order, then seed order
  std::vector<Baseline> baselines;
  std::vector<Aggregate> aggregates;
  std::optional<double> selected_lambda;
  std::map<std::string, std::string> provenance;
};

Reports evaluate_checkpoint(const Checkpoint& ckpt, const EvalData& eval, const std::string& attribute);

// Mean and standard error of values listed in seed order.
Stat summarize(const std::vector<double>& values);

// Per-group metrics: accuracy, selection_rate, dpd, eod, tpr, fpr.
// "__overall__": macro_accuracy, dpd, eod, accuracy_parity_gap, m_tp, m_fp.
// Undefined values are skipped and reflected in Stat::n.
std::vector<Aggregate> compute_aggregates(const std::vector<Row>& rows, const std::vector<double>& grid);

// merge(anchor, [(v, lambda) for v in vectors]) per grid point and arm.
SweepResult lambda_sweep(const std::vector<Arm>& arms, const SweepConfig& config);
// inject(anchor, vector, lambda); each arm carries exactly one vector.
SweepResult inject_sweep(const std::vector<Arm>& arms, const SweepConfig& config);

// Value of `criterion` for one row, already signed so that larger is better.
std::optional<double> criterion_score(const Reports& reports, const std::string& criterion);

// Argmax over (lambda, score) pairs; ties go to the smallest lambda.
double argmax_lambda(const std::vector<std::pair<double, double>>& scores);

// Lambda maximizing the across-seed mean of the criterion. Invariant under
// row order. Throws InvalidArgument when no row defines the criterion.
double select_lambda(const SweepResult& result, const std::string& criterion);

struct GroupScore {
  std::string group;
  std::optional<double> score;  // (dpd_ovr + eod_ovr) / 2 over the defined terms
  uint64_t n = 0;
};

// Descending score, then larger n, then name. Groups without a score rank
// last. Exclusions match case-insensitively. Throws InsufficientGroups when
// fewer than k groups remain.
std::vector<std::string> rank_groups(std::vector<GroupScore> scores, std::size_t k,
                                     const std::vector<std::string>& exclusions);

std::optional<double> worst_score(const GroupRow& row);

std::vector<std::string> worst_subgroups(const GroupReport& fft_report, std::size_t k,
                                         const std::vector<std::string>& exclusions);

// --- Emission ----------------------------------------------------------------

std::string result_to_json(const SweepResult& result);

// Columns: kind,lambda,seed,split,group,n,accuracy,selection_rate,dpd,eod,
// tpr,fpr,tpr_gap,fpr_gap,macro_accuracy,accuracy_parity_gap,m_tp,m_fp.
// kind is "row", "baseline:<name>", "mean" or "stderr". Undefined values are
// empty; numbers use the shortest round-trip decimal form.
std::string result_to_csv(const SweepResult& result);

// Overall `metric` against lambda on `split`: per-seed points, a mean line and
// dashed baseline means. metric is macro_accuracy, dpd or eod.
std::string render_svg(const SweepResult& result, const std::string& metric, const std::string& split);

// formats drawn from {"json", "csv", "svg"}: result.json, result.csv and
// acc.svg, dpd.svg, eod.svg in `dir`.
void emit(const SweepResult& result, const std::filesystem::path& dir, const std::vector<std::string>& formats);

// --- Full protocol on a synthetic corpus ---------------------------------------

struct PipelineConfig {
  SweepConfig sweep;
  toy::CorpusSpec corpus;
  toy::TrainHyper hyper;  // seed is replaced per arm
  uint32_t dim = toy::kDefaultDim;
  uint32_t hidden = toy::kDefaultHidden;
  bool lora = true;
  toy::LoraOptions lora_options;
  std::size_t worst_k = 2;
  std::vector<std::string> exclusions{"Other"};
  std::string worst_split = "test";
};

// Everything trained for one seed. The seed drives the split, the shared
// initialization and the shuffling of every trainer.
struct SeedModels {
  uint64_t seed = 0;
  toy::Corpus corpus;
  Checkpoint base, fft;
  std::optional<Checkpoint> lora;
  std::map<std::string, Checkpoint> subgroup;  // group name -> fine-tune
};

SeedModels train_seed(const PipelineConfig& config, const std::vector<toy::Example>& examples, uint64_t seed);
std::vector<SeedModels> train_all(const PipelineConfig& config);

// Uniform-lambda merge of every subgroup vector into the base model; FFT,
// LoRA and base evaluations are attached as baselines and the selected
// lambda is filled in.
SweepResult run_merge(const PipelineConfig& config, const std::vector<SeedModels>& models);

struct InjectRun {
  std::vector<std::string> worst;  // ranked
  std::vector<GroupScore> scores;  // seed-averaged, all groups
  std::map<std::string, SweepResult> per_group;
};

// Ranks groups by the seed-averaged FFT score on worst_split, then sweeps
// inject(fft, subgroup - base, lambda) for each of the worst_k groups.
InjectRun run_inject(const PipelineConfig& config, const std::vector<SeedModels>& models);

}  // namespace taskvec::sweep
