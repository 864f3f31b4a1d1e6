// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic subgroup-annotated corpus, hashed features and a one-hidden-layer
// tanh classifier with full and low-rank trainers.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskvec/checkpoint.hpp"
#include "taskvec/fair_metrics.hpp"

namespace taskvec::toy {

// ---------------------------------------------------------------- corpus ---

struct GroupSpec {
  std::string name;
  double proportion = 0.0;
  double base_rate = 0.5;  // P(y = 1 | group), in (0, 1)
  double bias = 0.0;       // >= 0; 0 makes markers independent of the label
};

struct CorpusSpec {
  std::string attribute = "gender";
  std::vector<GroupSpec> groups;
  uint64_t total = 1000;
  uint32_t vocab_size = 200;
  uint32_t min_tokens = 12;
  uint32_t max_tokens = 24;
  double marker_rate = 0.1;  // per-token marker probability at bias 0
  // Content tokens come from the toxic cue set with probability cue_match
  // when y = 1 (cue_cross when y = 0), symmetrically for the benign cue set,
  // and uniformly from the neutral range otherwise.
  double cue_match = 0.35;
  double cue_cross = 0.02;
  uint64_t seed = 13;

  // Throws InvalidSpec.
  void validate() const;
};

inline constexpr int kMarkersPerGroup = 4;

// Cue sets: tokens w0..w{V/10-1} are toxic cues, w{V/10}..w{2V/10-1} benign.
uint32_t cue_set_size(uint32_t vocab_size);
std::string vocab_token(uint32_t index);
std::string marker_token(std::size_t group_index, int k);

// Group sizes proportional to the published subgroup counts.
CorpusSpec gender_preset();
CorpusSpec race_preset();

// Accepts {"preset": "gender"|"race", ...overrides} or a full description.
// A group may give "count" instead of "proportion"; counts are normalized.
CorpusSpec spec_from_json(const std::string& text);
std::string spec_to_json(const CorpusSpec& spec);

struct Example {
  std::string id;
  std::vector<std::string> tokens;
  int y_true = 0;
  std::map<std::string, std::string> groups;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Corpus {
  std::vector<Example> train, test;
};

// All examples in id order; each is drawn from its own (seed, index) stream.
std::vector<Example> generate_examples(const CorpusSpec& spec);

// Stratified split: per group, a seeded shuffle then the first (8n + 5) / 10
// go to train. Both halves keep the original relative order.
Corpus split_corpus(const std::vector<Example>& examples, const std::string& attribute, uint64_t seed);

Corpus gen_corpus(const CorpusSpec& spec);

std::string format_examples(const std::vector<Example>& examples);
std::vector<Example> parse_examples(const std::string& text);

// Directory layout: train.jsonl, test.jsonl and, when given, spec.json.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusSpec* spec = nullptr);
Corpus read_corpus(const std::filesystem::path& dir);

// Examples whose `attribute` equals `group`.
std::vector<Example> filter_group(const std::vector<Example>& examples, const std::string& attribute,
                                  const std::string& group);

// ------------------------------------------------------------- features ---

// FNV-1a 64 over the token bytes (offset basis 0xcbf29ce484222325,
// prime 0x100000001b3).
uint64_t fnv1a64(std::string_view bytes);

// Sorted unique indices with positive counts.
struct SparseVec {
  std::vector<uint32_t> index;
  std::vector<double> value;
};

// Bag of tokens, bucket = fnv1a64(token) mod dim.
SparseVec featurize(const std::vector<std::string>& tokens, uint32_t dim);

struct Sample {
  SparseVec x;
  int y = 0;
};
std::vector<Sample> featurize_all(const std::vector<Example>& examples, uint32_t dim);

// ---------------------------------------------------------------- model ---

inline constexpr uint32_t kDefaultDim = 4096;
inline constexpr uint32_t kDefaultHidden = 32;

// logit = w2 . tanh(x W1 + b1) + b2, with W1 row-major [dim, hidden].
struct ToyModel {
  uint32_t dim = kDefaultDim;
  uint32_t hidden = kDefaultHidden;
  std::vector<double> W1, b1, w2;
  double b2 = 0.0;

  double logit(const SparseVec& x) const;

  // Tensors "W1" [dim, hidden], "b1" [hidden], "w2" [hidden], "b2" [] in F32.
  Checkpoint to_checkpoint(Metadata metadata = {}) const;
  // Throws IncompatibleCheckpoint.
  static ToyModel from_checkpoint(const Checkpoint& ckpt);
};

// W1 ~ N(0, 0.1^2), w2 ~ N(0, 1/hidden), biases zero; values are rounded to
// F32 so the model equals its own checkpoint.
ToyModel init_model(uint64_t seed, uint32_t dim = kDefaultDim, uint32_t hidden = kDefaultHidden);

struct Gradient {
  std::vector<double> W1, b1, w2;
  double b2 = 0.0;
};

// Mean binary cross-entropy of sigmoid(logit) over `batch`.
double loss(const ToyModel& m, const std::vector<Sample>& batch);
// Mean loss and its exact gradient.
double loss_and_grad(const ToyModel& m, const std::vector<Sample>& batch, Gradient& grad);

struct TrainHyper {
  uint32_t epochs = 200;
  double learning_rate = 0.1;
  uint32_t batch_size = 32;
  uint64_t seed = 13;
};

// Mini-batch gradient descent in place. Epoch e visits samples in the order
// of a shuffle drawn from stream (seed, e). Throws DivergedTraining when the
// loss or any parameter becomes non-finite.
void fit(ToyModel& m, const std::vector<Sample>& data, const TrainHyper& hyper);

// Metadata keys written by the trainers.
inline constexpr const char* kMetaSeed = "seed";
inline constexpr const char* kMetaDataset = "dataset_id";
inline constexpr const char* kMetaSubset = "subset";
inline constexpr const char* kMetaKind = "kind";
inline constexpr const char* kMetaWarning = "warning";

// Stable digest of an example list (first 16 hex digits of SHA-256 of its
// JSONL form).
std::string dataset_id(const std::vector<Example>& examples);

// Full fine-tune from `init`. Throws EmptyGroup for empty data.
Checkpoint train(const std::vector<Example>& data, const Checkpoint& init, const TrainHyper& hyper);

// Same contract restricted to one subgroup. Single-class data trains with
// metadata warning "DegenerateLabels".
Checkpoint train_subgroup(const std::vector<Example>& data, const std::string& attribute, const std::string& group,
                          const Checkpoint& init, const TrainHyper& hyper);

struct LoraAdapter {
  uint32_t rank = 8;
  double alpha = 16.0;
  uint32_t dim = 0, hidden = 0;
  std::vector<double> A;  // [dim, rank]
  std::vector<double> B;  // [rank, hidden]
  double scaling() const { return alpha / static_cast<double>(rank); }
  // (alpha / rank) A B, row-major [dim, hidden].
  std::vector<double> delta() const;
  Checkpoint to_checkpoint() const;  // "lora_A", "lora_B"
};

struct LoraOptions {
  uint32_t rank = 8;
  double alpha = 16.0;
  double init_sd = 0.05;  // A ~ N(0, init_sd^2); B = 0
  bool train_bias = true;  // b2
};

struct LoraResult {
  Checkpoint merged;  // W1 + (alpha / rank) A B, other tensors from base
  LoraAdapter adapter;
};

// W1, b1 and w2 stay frozen.
LoraResult train_lora(const std::vector<Example>& data, const Checkpoint& base, const LoraOptions& lora,
                      const TrainHyper& hyper);

// score = sigmoid(logit), y_pred = binarize(score, 0.5). Throws
// IncompatibleCheckpoint.
std::vector<PredictionRecord> predict(const Checkpoint& ckpt, const std::vector<Example>& examples);

using GradFn = std::function<double(const ToyModel&, const std::vector<Sample>&, Gradient&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline constexpr std::size_t kMinGradCheck = 100;

// Central differences against `grad_fn` (default loss_and_grad) on every b1,
// w2 and b2 entry plus W1 entries from rows the data touches: `w1_samples` of
// them, or more when needed to reach kMinGradCheck parameters in total.
// rel = |a - n| / max(|a|, |n|, 1e-6). Throws InvalidArgument unless
// eps in [1e-6, 1e-3].
GradCheckResult grad_check(const ToyModel& m, const std::vector<Sample>& data, double eps, uint64_t seed,
                           std::size_t w1_samples = 64, const GradFn& grad_fn = {});

}  // namespace taskvec::toy
