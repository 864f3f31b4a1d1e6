// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/toy_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "json.hpp"
#include "taskvec/error.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/rng.hpp"

namespace taskvec::toy {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_spec(const std::string& what) { throw Error(ErrorCode::kInvalidSpec, "corpus spec: " + what); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

std::vector<double> widen(const Tensor& t) {
  const auto f = t.to_f32();
  return {f.begin(), f.end()};
}

std::vector<float> narrow(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

// Forward pass; leaves the hidden activations in `h` and returns the logit.
double forward(const ToyModel& m, const SparseVec& x, std::vector<double>& h) {
  const uint32_t H = m.hidden;
  h.assign(m.b1.begin(), m.b1.end());
  for (std::size_t n = 0; n < x.index.size(); ++n) {
    const double* row = &m.W1[static_cast<std::size_t>(x.index[n]) * H];
    const double v = x.value[n];
    for (uint32_t k = 0; k < H; ++k) h[k] += v * row[k];
  }
  double z = m.b2;
  for (uint32_t k = 0; k < H; ++k) {
    h[k] = std::tanh(h[k]);
    z += m.w2[k] * h[k];
  }
  return z;
}

std::string meta_id(const std::string& kind, const std::string& subset, uint64_t seed, const std::string& data) {
  return kind + ":" + subset + ":s" + std::to_string(seed) + ":" + data;
}

}  // namespace

// ---------------------------------------------------------------- corpus ---

void CorpusSpec::validate() const {
  if (attribute.empty()) bad_spec("attribute name is empty");
  if (groups.empty()) bad_spec("no groups");
  std::set<std::string> names;
  double sum = 0.0;
  for (const auto& g : groups) {
    if (g.name.empty()) bad_spec("group with empty name");
    if (!names.insert(g.name).second) bad_spec("duplicate group '" + g.name + "'");
    if (!(g.proportion >= 0.0) || !std::isfinite(g.proportion)) bad_spec("group '" + g.name + "': bad proportion");
    if (!(g.base_rate > 0.0 && g.base_rate < 1.0)) bad_spec("group '" + g.name + "': base rate must be in (0, 1)");
    if (!(g.bias >= 0.0) || !std::isfinite(g.bias)) bad_spec("group '" + g.name + "': bias must be finite and >= 0");
    sum += g.proportion;
  }
  if (std::fabs(sum - 1.0) > 1e-9) bad_spec("proportions sum to " + format_double(sum) + ", not 1");
  if (total < 10 * groups.size()) bad_spec("total size must be at least 10 x group count");
  if (vocab_size < 20) bad_spec("vocabulary size must be at least 20");
  if (min_tokens == 0 || min_tokens > max_tokens) bad_spec("token range must satisfy 1 <= min <= max");
  if (!(marker_rate >= 0.0 && marker_rate < 1.0)) bad_spec("marker rate must be in [0, 1)");
  if (!(cue_match >= 0.0 && cue_cross >= 0.0 && cue_match + cue_cross <= 1.0)) {
    bad_spec("cue probabilities must be >= 0 with cue_match + cue_cross <= 1");
  }
}

uint32_t cue_set_size(uint32_t vocab_size) { return vocab_size / 10; }

std::string vocab_token(uint32_t index) { return "w" + std::to_string(index); }

std::string marker_token(std::size_t group_index, int k) {
  return "g" + std::to_string(group_index) + "m" + std::to_string(k);
}

namespace {

CorpusSpec preset(std::string attribute, const std::vector<std::tuple<std::string, int, double, double>>& rows) {
  CorpusSpec s;
  s.attribute = std::move(attribute);
  int total = 0;
  for (const auto& r : rows) total += std::get<1>(r);
  for (const auto& [name, count, rate, bias] : rows) {
    s.groups.push_back({name, static_cast<double>(count) / total, rate, bias});
  }
  s.total = static_cast<uint64_t>(total);
  return s;
}

}  // namespace

CorpusSpec gender_preset() {
  return preset("gender", {{"Men", 817, 0.35, 1.0},
                           {"Non-binary", 114, 0.45, 0.3},
                           {"Trans men", 178, 0.45, 0.3},
                           {"Trans unspecified", 173, 0.45, 0.3},
                           {"Trans women", 148, 0.5, 0.3},
                           {"Women", 2057, 0.4, 1.0},
                           {"Other", 59, 0.4, 0.3}});
}

CorpusSpec race_preset() {
  return preset("race", {{"Asian", 311, 0.4, 1.0},
                         {"Black", 1007, 0.45, 0.3},
                         {"Latinx", 368, 0.4, 0.3},
                         {"Native American", 153, 0.4, 1.0},
                         {"Middle Eastern", 493, 0.45, 0.3},
                         {"Pacific Islander", 138, 0.4, 0.3},
                         {"White", 580, 0.35, 0.3},
                         {"Other", 302, 0.4, 0.3}});
}

CorpusSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad_spec(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) bad_spec("top level must be an object");
  CorpusSpec s;
  try {
    if (j.contains("preset")) {
      const auto p = j.at("preset").get<std::string>();
      if (p == "gender") {
        s = gender_preset();
      } else if (p == "race") {
        s = race_preset();
      } else {
        bad_spec("unknown preset '" + p + "'");
      }
    }
    static const std::set<std::string> known{"preset",     "attribute",  "groups",      "total", "vocab_size",
                                             "min_tokens", "max_tokens", "marker_rate", "cue_match", "cue_cross",
                                             "seed"};
    for (const auto& [k, _] : j.items()) {
      if (!known.contains(k)) bad_spec("unknown field '" + k + "'");
    }
    if (j.contains("attribute")) s.attribute = j.at("attribute").get<std::string>();
    if (j.contains("total")) s.total = j.at("total").get<uint64_t>();
    if (j.contains("vocab_size")) s.vocab_size = j.at("vocab_size").get<uint32_t>();
    if (j.contains("min_tokens")) s.min_tokens = j.at("min_tokens").get<uint32_t>();
    if (j.contains("max_tokens")) s.max_tokens = j.at("max_tokens").get<uint32_t>();
    if (j.contains("marker_rate")) s.marker_rate = j.at("marker_rate").get<double>();
    if (j.contains("cue_match")) s.cue_match = j.at("cue_match").get<double>();
    if (j.contains("cue_cross")) s.cue_cross = j.at("cue_cross").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<uint64_t>();
    if (j.contains("groups")) {
      const auto& gs = j.at("groups");
      if (!gs.is_array()) bad_spec("groups must be an array");
      s.groups.clear();
      bool counts = false, props = false;
      double count_sum = 0.0;
      for (const auto& g : gs) {
        GroupSpec out;
        out.name = g.at("name").get<std::string>();
        if (g.contains("count")) {
          counts = true;
          out.proportion = g.at("count").get<double>();
          count_sum += out.proportion;
        }
        if (g.contains("proportion")) {
          props = true;
          out.proportion = g.at("proportion").get<double>();
        }
        if (g.contains("base_rate")) out.base_rate = g.at("base_rate").get<double>();
        if (g.contains("bias")) out.bias = g.at("bias").get<double>();
        s.groups.push_back(std::move(out));
      }
      if (counts && props) bad_spec("mix of counts and proportions");
      if (counts) {
        if (!(count_sum > 0)) bad_spec("counts must sum to a positive value");
        for (auto& g : s.groups) g.proportion /= count_sum;
        // Renormalized proportions can miss 1 by a few ulps; fold the residue
        // into the last group.
        double sum = 0.0;
        for (std::size_t i = 0; i + 1 < s.groups.size(); ++i) sum += s.groups[i].proportion;
        s.groups.back().proportion = 1.0 - sum;
      }
    }
  } catch (const json::exception& e) {
    bad_spec(std::string("field has the wrong type: ") + e.what());
  }
  s.validate();
  return s;
}

std::string spec_to_json(const CorpusSpec& s) {
  ojson j;
  j["attribute"] = s.attribute;
  j["groups"] = ojson::array();
  for (const auto& g : s.groups) {
    ojson o;
    o["name"] = g.name;
    o["proportion"] = g.proportion;
    o["base_rate"] = g.base_rate;
    o["bias"] = g.bias;
    j["groups"].push_back(o);
  }
  j["total"] = s.total;
  j["vocab_size"] = s.vocab_size;
  j["min_tokens"] = s.min_tokens;
  j["max_tokens"] = s.max_tokens;
  j["marker_rate"] = s.marker_rate;
  j["cue_match"] = s.cue_match;
  j["cue_cross"] = s.cue_cross;
  j["seed"] = s.seed;
  return j.dump(2) + "\n";
}

std::vector<Example> generate_examples(const CorpusSpec& spec) {
  spec.validate();
  const std::size_t G = spec.groups.size();
  std::vector<double> cum(G);
  double acc = 0.0;
  for (std::size_t g = 0; g < G; ++g) cum[g] = (acc += spec.groups[g].proportion);
  const uint32_t V = spec.vocab_size;
  const uint32_t cue = cue_set_size(V);
  const uint32_t neutral = V - 2 * cue;
  const auto n = static_cast<int64_t>(spec.total);
  std::vector<Example> out(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<uint64_t>(i));
    Example& ex = out[static_cast<std::size_t>(i)];
    ex.id = "e" + std::to_string(i);
    const double u = rng.uniform();
    std::size_t g = 0;
    while (g + 1 < G && u >= cum[g]) ++g;
    const GroupSpec& gs = spec.groups[g];
    ex.groups[spec.attribute] = gs.name;
    ex.y_true = rng.bernoulli(gs.base_rate) ? 1 : 0;
    const uint32_t len = spec.min_tokens + static_cast<uint32_t>(rng.below(spec.max_tokens - spec.min_tokens + 1));
    const double mrate =
        std::min(0.9, ex.y_true ? spec.marker_rate * (1.0 + gs.bias) : spec.marker_rate / (1.0 + gs.bias));
    const double p_toxic = ex.y_true ? spec.cue_match : spec.cue_cross;
    const double p_benign = ex.y_true ? spec.cue_cross : spec.cue_match;
    ex.tokens.reserve(len);
    for (uint32_t t = 0; t < len; ++t) {
      if (rng.bernoulli(mrate)) {
        ex.tokens.push_back(marker_token(g, static_cast<int>(rng.below(kMarkersPerGroup))));
        continue;
      }
      const double c = rng.uniform();
      if (c < p_toxic) {
        ex.tokens.push_back(vocab_token(static_cast<uint32_t>(rng.below(cue))));
      } else if (c < p_toxic + p_benign) {
        ex.tokens.push_back(vocab_token(cue + static_cast<uint32_t>(rng.below(cue))));
      } else {
        ex.tokens.push_back(vocab_token(2 * cue + static_cast<uint32_t>(rng.below(neutral))));
      }
    }
  }
  return out;
}

Corpus split_corpus(const std::vector<Example>& examples, const std::string& attribute, uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto it = examples[i].groups.find(attribute);
    if (it == examples[i].groups.end()) {
      throw Error(ErrorCode::kMissingAttribute, "example '" + examples[i].id + "' has no '" + attribute + "'");
    }
    by_group[it->second].push_back(i);
  }
  std::vector<char> to_train(examples.size(), 0);
  for (auto& [name, idx] : by_group) {
    Rng rng(splitmix64(seed ^ fnv1a64(name)));
    rng.shuffle(idx);
    const std::size_t n_train = (8 * idx.size() + 5) / 10;
    for (std::size_t k = 0; k < n_train; ++k) to_train[idx[k]] = 1;
  }
  Corpus c;
  for (std::size_t i = 0; i < examples.size(); ++i) (to_train[i] ? c.train : c.test).push_back(examples[i]);
  return c;
}

Corpus gen_corpus(const CorpusSpec& spec) { return split_corpus(generate_examples(spec), spec.attribute, spec.seed); }

std::string format_examples(const std::vector<Example>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    ojson j;
    j["id"] = ex.id;
    j["tokens"] = ex.tokens;
    j["y_true"] = ex.y_true;
    j["groups"] = ex.groups;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Example> parse_examples(const std::string& text) {
  std::vector<Example> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& what) -> Error {
      return Error(ErrorCode::kInvalidRecord, "corpus line " + std::to_string(line_no) + ": " + what);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw fail("not valid JSON");
    }
    try {
      Example ex;
      ex.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      ex.tokens = j.at("tokens").get<std::vector<std::string>>();
      const auto& y = j.at("y_true");
      if (y.is_boolean()) {
        ex.y_true = y.get<bool>() ? 1 : 0;
      } else {
        const auto v = y.get<int>();
        if (v != 0 && v != 1) throw fail("y_true must be 0 or 1");
        ex.y_true = v;
      }
      ex.groups = j.at("groups").get<std::map<std::string, std::string>>();
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw fail(e.what());
    }
  }
  return out;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusSpec* spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create '" + dir.string() + "': " + ec.message());
  write_file_atomic(dir / "train.jsonl", format_examples(corpus.train));
  write_file_atomic(dir / "test.jsonl", format_examples(corpus.test));
  if (spec) write_file_atomic(dir / "spec.json", spec_to_json(*spec));
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.train = parse_examples(read_file_text(dir / "train.jsonl"));
  c.test = parse_examples(read_file_text(dir / "test.jsonl"));
  return c;
}

std::vector<Example> filter_group(const std::vector<Example>& examples, const std::string& attribute,
                                  const std::string& group) {
  std::vector<Example> out;
  for (const auto& ex : examples) {
    const auto it = ex.groups.find(attribute);
    if (it != ex.groups.end() && it->second == group) out.push_back(ex);
  }
  return out;
}

// ------------------------------------------------------------- features ---

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SparseVec featurize(const std::vector<std::string>& tokens, uint32_t dim) {
  std::vector<uint32_t> buckets;
  buckets.reserve(tokens.size());
  for (const auto& t : tokens) buckets.push_back(static_cast<uint32_t>(fnv1a64(t) % dim));
  std::sort(buckets.begin(), buckets.end());
  SparseVec v;
  for (std::size_t i = 0; i < buckets.size();) {
    std::size_t j = i;
    while (j < buckets.size() && buckets[j] == buckets[i]) ++j;
    v.index.push_back(buckets[i]);
    v.value.push_back(static_cast<double>(j - i));
    i = j;
  }
  return v;
}

std::vector<Sample> featurize_all(const std::vector<Example>& examples, uint32_t dim) {
  std::vector<Sample> out(examples.size());
  const auto n = static_cast<int64_t>(examples.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = {featurize(examples[static_cast<std::size_t>(i)].tokens, dim),
                                        examples[static_cast<std::size_t>(i)].y_true};
  }
  return out;
}

// ---------------------------------------------------------------- model ---

double ToyModel::logit(const SparseVec& x) const {
  std::vector<double> h;
  return forward(*this, x, h);
}

Checkpoint ToyModel::to_checkpoint(Metadata metadata) const {
  const float b2f = static_cast<float>(b2);
  std::vector<std::pair<std::string, Tensor>> ts;
  ts.emplace_back("W1", Tensor::from_f32({dim, hidden}, narrow(W1)));
  ts.emplace_back("b1", Tensor::from_f32({hidden}, narrow(b1)));
  ts.emplace_back("w2", Tensor::from_f32({hidden}, narrow(w2)));
  ts.emplace_back("b2", Tensor::from_f32({}, std::span<const float>(&b2f, 1)));
  return Checkpoint(std::move(ts), std::move(metadata));
}

ToyModel ToyModel::from_checkpoint(const Checkpoint& ckpt) {
  auto fail = [](const std::string& what) -> Error {
    return Error(ErrorCode::kIncompatibleCheckpoint, "not a toy model checkpoint: " + what);
  };
  for (const char* name : {"W1", "b1", "w2", "b2"}) {
    if (!ckpt.contains(name)) throw fail(std::string("missing tensor '") + name + "'");
  }
  if (ckpt.size() != 4) throw fail("unexpected extra tensors");
  const Shape& s = ckpt.at("W1").shape();
  if (s.size() != 2 || s[0] == 0 || s[1] == 0 || s[0] > UINT32_MAX || s[1] > UINT32_MAX) {
    throw fail("W1 must be a non-empty matrix");
  }
  ToyModel m;
  m.dim = static_cast<uint32_t>(s[0]);
  m.hidden = static_cast<uint32_t>(s[1]);
  if (ckpt.at("b1").shape() != Shape{m.hidden}) throw fail("b1 shape does not match W1");
  if (ckpt.at("w2").shape() != Shape{m.hidden}) throw fail("w2 shape does not match W1");
  if (!ckpt.at("b2").shape().empty()) throw fail("b2 must be a scalar");
  m.W1 = widen(ckpt.at("W1"));
  m.b1 = widen(ckpt.at("b1"));
  m.w2 = widen(ckpt.at("w2"));
  m.b2 = widen(ckpt.at("b2"))[0];
  for (const auto* v : {&m.W1, &m.b1, &m.w2}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw fail("non-finite parameter");
    }
  }
  if (!std::isfinite(m.b2)) throw fail("non-finite parameter");
  return m;
}

ToyModel init_model(uint64_t seed, uint32_t dim, uint32_t hidden) {
  if (dim == 0 || hidden == 0) throw Error(ErrorCode::kInvalidArgument, "model dimensions must be positive");
  Rng rng(splitmix64(seed));
  ToyModel m;
  m.dim = dim;
  m.hidden = hidden;
  auto f32 = [](double x) { return static_cast<double>(static_cast<float>(x)); };
  m.W1.resize(static_cast<std::size_t>(dim) * hidden);
  for (auto& w : m.W1) w = f32(rng.normal(0.0, 0.1));
  m.b1.assign(hidden, 0.0);
  m.w2.resize(hidden);
  const double sd = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& w : m.w2) w = f32(rng.normal(0.0, sd));
  m.b2 = 0.0;
  return m;
}

namespace {

// Adds weight * d(loss)/d(params) for one sample; W1 rows go through `row`.
// Returns the sample's loss.
template <class RowGrad>
double backprop(const ToyModel& m, const Sample& s, double weight, std::vector<double>& h, std::vector<double>& gb1,
                std::vector<double>& gw2, double& gb2, RowGrad row) {
  const double z = forward(m, s.x, h);
  const double dz = weight * (sigmoid(z) - s.y);
  gb2 += dz;
  for (uint32_t k = 0; k < m.hidden; ++k) {
    gw2[k] += dz * h[k];
    h[k] = dz * m.w2[k] * (1.0 - h[k] * h[k]);  // now d loss / d pre-activation
    gb1[k] += h[k];
  }
  for (std::size_t n = 0; n < s.x.index.size(); ++n) {
    double* g = row(s.x.index[n]);
    const double v = s.x.value[n];
    for (uint32_t k = 0; k < m.hidden; ++k) g[k] += v * h[k];
  }
  return softplus(z) - s.y * z;
}

// Dense per-batch W1 gradient that only clears the rows it touched.
class RowAccumulator {
 public:
  RowAccumulator(uint32_t dim, uint32_t width) : width_(width), data_(static_cast<std::size_t>(dim) * width), used_(dim) {}
  double* row(uint32_t r) {
    if (!used_[r]) {
      used_[r] = 1;
      rows_.push_back(r);
    }
    return &data_[static_cast<std::size_t>(r) * width_];
  }
  // Applies param[r] -= lr * grad[r] to touched rows in first-touch order,
  // then clears them.
  void step(std::vector<double>& param, double lr) {
    for (uint32_t r : rows_) {
      double* g = &data_[static_cast<std::size_t>(r) * width_];
      double* p = &param[static_cast<std::size_t>(r) * width_];
      for (uint32_t k = 0; k < width_; ++k) {
        p[k] -= lr * g[k];
        g[k] = 0.0;
      }
      used_[r] = 0;
    }
    rows_.clear();
  }

 private:
  uint32_t width_;
  std::vector<double> data_;
  std::vector<char> used_;
  std::vector<uint32_t> rows_;
};

void check_hyper(const TrainHyper& h) {
  if (h.batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be positive");
  if (!(h.learning_rate > 0.0) || !std::isfinite(h.learning_rate)) {
    throw Error(ErrorCode::kInvalidArgument, "learning rate must be positive and finite");
  }
}

void check_dims(const ToyModel& m, const std::vector<Sample>& data) {
  for (const auto& s : data) {
    if (!s.x.index.empty() && s.x.index.back() >= m.dim) {
      throw Error(ErrorCode::kIncompatibleCheckpoint, "feature index exceeds model dimension");
    }
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, uint32_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng::stream(seed, epoch).shuffle(order);
  return order;
}

[[noreturn]] void diverged(uint32_t epoch) {
  throw Error(ErrorCode::kDivergedTraining, "loss or parameters became non-finite in epoch " + std::to_string(epoch));
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

double loss(const ToyModel& m, const std::vector<Sample>& batch) {
  check_dims(m, batch);
  std::vector<double> h;
  double total = 0.0;
  for (const auto& s : batch) {
    const double z = forward(m, s.x, h);
    total += softplus(z) - s.y * z;
  }
  return batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
}

double loss_and_grad(const ToyModel& m, const std::vector<Sample>& batch, Gradient& grad) {
  check_dims(m, batch);
  grad.W1.assign(m.W1.size(), 0.0);
  grad.b1.assign(m.hidden, 0.0);
  grad.w2.assign(m.hidden, 0.0);
  grad.b2 = 0.0;
  if (batch.empty()) return 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  std::vector<double> h;
  double total = 0.0;
  for (const auto& s : batch) {
    total += backprop(m, s, w, h, grad.b1, grad.w2, grad.b2,
                      [&](uint32_t r) { return &grad.W1[static_cast<std::size_t>(r) * m.hidden]; });
  }
  return total * w;
}

void fit(ToyModel& m, const std::vector<Sample>& data, const TrainHyper& hyper) {
  check_hyper(hyper);
  check_dims(m, data);
  RowAccumulator gW1(m.dim, m.hidden);
  std::vector<double> gb1(m.hidden), gw2(m.hidden), h;
  for (uint32_t e = 0; e < hyper.epochs; ++e) {
    const auto order = epoch_order(data.size(), hyper.seed, e);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      std::fill(gb1.begin(), gb1.end(), 0.0);
      std::fill(gw2.begin(), gw2.end(), 0.0);
      double gb2 = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        epoch_loss += backprop(m, data[order[i]], w, h, gb1, gw2, gb2, [&](uint32_t r) { return gW1.row(r); });
      }
      if (!std::isfinite(epoch_loss)) diverged(e);
      gW1.step(m.W1, hyper.learning_rate);
      for (uint32_t k = 0; k < m.hidden; ++k) {
        m.b1[k] -= hyper.learning_rate * gb1[k];
        m.w2[k] -= hyper.learning_rate * gw2[k];
      }
      m.b2 -= hyper.learning_rate * gb2;
    }
    if (!std::isfinite(m.b2) || !all_finite(m.b1) || !all_finite(m.w2) || !all_finite(m.W1)) diverged(e);
  }
}

std::string dataset_id(const std::vector<Example>& examples) {
  return sha256_hex(format_examples(examples)).substr(0, 16);
}

namespace {

Metadata trained_metadata(const std::string& kind, const std::string& subset, const std::vector<Example>& data,
                          uint64_t seed) {
  const std::string did = dataset_id(data);
  return {{kMetaKind, kind},
          {kMetaSeed, std::to_string(seed)},
          {kMetaDataset, did},
          {kMetaSubset, subset},
          {"id", meta_id(kind, subset, seed, did)}};
}

}  // namespace

Checkpoint train(const std::vector<Example>& data, const Checkpoint& init, const TrainHyper& hyper) {
  if (data.empty()) throw Error(ErrorCode::kEmptyGroup, "training data is empty");
  ToyModel m = ToyModel::from_checkpoint(init);
  fit(m, featurize_all(data, m.dim), hyper);
  return m.to_checkpoint(trained_metadata("fft", "all", data, hyper.seed));
}

Checkpoint train_subgroup(const std::vector<Example>& data, const std::string& attribute, const std::string& group,
                          const Checkpoint& init, const TrainHyper& hyper) {
  const auto subset = filter_group(data, attribute, group);
  if (subset.empty()) {
    throw Error(ErrorCode::kEmptyGroup, "group '" + group + "' has no training examples for '" + attribute + "'");
  }
  ToyModel m = ToyModel::from_checkpoint(init);
  fit(m, featurize_all(subset, m.dim), hyper);
  Metadata meta = trained_metadata("subgroup", attribute + "=" + group, subset, hyper.seed);
  const bool all_pos = std::all_of(subset.begin(), subset.end(), [](const Example& e) { return e.y_true == 1; });
  const bool all_neg = std::all_of(subset.begin(), subset.end(), [](const Example& e) { return e.y_true == 0; });
  if (all_pos || all_neg) meta[kMetaWarning] = "DegenerateLabels";
  return m.to_checkpoint(std::move(meta));
}

std::vector<double> LoraAdapter::delta() const {
  std::vector<double> d(static_cast<std::size_t>(dim) * hidden, 0.0);
  const double s = scaling();
  for (uint32_t i = 0; i < dim; ++i) {
    for (uint32_t k = 0; k < rank; ++k) {
      const double a = s * A[static_cast<std::size_t>(i) * rank + k];
      if (a == 0.0) continue;
      const double* b = &B[static_cast<std::size_t>(k) * hidden];
      double* out = &d[static_cast<std::size_t>(i) * hidden];
      for (uint32_t h = 0; h < hidden; ++h) out[h] += a * b[h];
    }
  }
  return d;
}

Checkpoint LoraAdapter::to_checkpoint() const {
  std::vector<std::pair<std::string, Tensor>> ts;
  ts.emplace_back("lora_A", Tensor::from_f32({dim, rank}, narrow(A)));
  ts.emplace_back("lora_B", Tensor::from_f32({rank, hidden}, narrow(B)));
  return Checkpoint(std::move(ts), {{"rank", std::to_string(rank)}, {"alpha", format_double(alpha)}});
}

LoraResult train_lora(const std::vector<Example>& data, const Checkpoint& base, const LoraOptions& lora,
                      const TrainHyper& hyper) {
  if (lora.rank == 0) throw Error(ErrorCode::kInvalidArgument, "LoRA rank must be at least 1");
  if (!std::isfinite(lora.alpha) || !(lora.init_sd >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "LoRA alpha and init sd must be finite");
  }
  if (data.empty()) throw Error(ErrorCode::kEmptyGroup, "training data is empty");
  check_hyper(hyper);
  ToyModel m = ToyModel::from_checkpoint(base);
  const uint32_t H = m.hidden, R = lora.rank;
  LoraAdapter ad;
  ad.rank = R;
  ad.alpha = lora.alpha;
  ad.dim = m.dim;
  ad.hidden = H;
  ad.A.resize(static_cast<std::size_t>(m.dim) * R);
  Rng init(splitmix64(hyper.seed ^ 0x6c6f7261ULL));
  for (auto& a : ad.A) a = init.normal(0.0, lora.init_sd);
  ad.B.assign(static_cast<std::size_t>(R) * H, 0.0);
  const double sc = ad.scaling();

  const auto samples = featurize_all(data, m.dim);
  check_dims(m, samples);
  RowAccumulator gA(m.dim, R);
  std::vector<double> gB(static_cast<std::size_t>(R) * H), pre(H), u(R), gu(R);
  for (uint32_t e = 0; e < hyper.epochs; ++e) {
    const auto order = epoch_order(samples.size(), hyper.seed, e);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      std::fill(gB.begin(), gB.end(), 0.0);
      double gb2 = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = samples[order[i]];
        // pre = b1 + x W1 + sc (x A) B
        std::copy(m.b1.begin(), m.b1.end(), pre.begin());
        std::fill(u.begin(), u.end(), 0.0);
        for (std::size_t n = 0; n < s.x.index.size(); ++n) {
          const std::size_t r = s.x.index[n];
          const double v = s.x.value[n];
          for (uint32_t k = 0; k < H; ++k) pre[k] += v * m.W1[r * H + k];
          for (uint32_t k = 0; k < R; ++k) u[k] += v * ad.A[r * R + k];
        }
        for (uint32_t k = 0; k < R; ++k) {
          const double uk = sc * u[k];
          for (uint32_t h = 0; h < H; ++h) pre[h] += uk * ad.B[static_cast<std::size_t>(k) * H + h];
        }
        double z = m.b2;
        for (uint32_t h = 0; h < H; ++h) {
          pre[h] = std::tanh(pre[h]);
          z += m.w2[h] * pre[h];
        }
        epoch_loss += softplus(z) - s.y * z;
        const double dz = w * (sigmoid(z) - s.y);
        gb2 += dz;
        for (uint32_t h = 0; h < H; ++h) pre[h] = dz * m.w2[h] * (1.0 - pre[h] * pre[h]);
        for (uint32_t k = 0; k < R; ++k) {
          double acc = 0.0;
          for (uint32_t h = 0; h < H; ++h) {
            gB[static_cast<std::size_t>(k) * H + h] += sc * u[k] * pre[h];
            acc += ad.B[static_cast<std::size_t>(k) * H + h] * pre[h];
          }
          gu[k] = sc * acc;
        }
        for (std::size_t n = 0; n < s.x.index.size(); ++n) {
          double* g = gA.row(s.x.index[n]);
          for (uint32_t k = 0; k < R; ++k) g[k] += s.x.value[n] * gu[k];
        }
      }
      if (!std::isfinite(epoch_loss)) diverged(e);
      gA.step(ad.A, hyper.learning_rate);
      for (std::size_t i = 0; i < gB.size(); ++i) ad.B[i] -= hyper.learning_rate * gB[i];
      if (lora.train_bias) m.b2 -= hyper.learning_rate * gb2;
    }
    if (!std::isfinite(m.b2) || !all_finite(ad.A) || !all_finite(ad.B)) diverged(e);
  }

  const auto d = ad.delta();
  ToyModel merged = m;
  for (std::size_t i = 0; i < d.size(); ++i) merged.W1[i] += d[i];
  Metadata meta = trained_metadata("lora", "all", data, hyper.seed);
  meta["rank"] = std::to_string(R);
  meta["alpha"] = format_double(lora.alpha);
  return {merged.to_checkpoint(std::move(meta)), std::move(ad)};
}

std::vector<PredictionRecord> predict(const Checkpoint& ckpt, const std::vector<Example>& examples) {
  const ToyModel m = ToyModel::from_checkpoint(ckpt);
  const auto samples = featurize_all(examples, m.dim);
  std::vector<PredictionRecord> out(examples.size());
  const auto n = static_cast<int64_t>(examples.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    PredictionRecord& r = out[k];
    r.id = examples[k].id;
    r.y_true = examples[k].y_true;
    r.score = sigmoid(m.logit(samples[k].x));
    r.y_pred = binarize(r.score, kDefaultThreshold);
    r.groups = examples[k].groups;
  }
  return out;
}

GradCheckResult grad_check(const ToyModel& m, const std::vector<Sample>& data, double eps, uint64_t seed,
                           std::size_t w1_samples, const GradFn& grad_fn) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw Error(ErrorCode::kInvalidArgument, "eps must be in [1e-6, 1e-3]");
  Gradient g;
  if (grad_fn) {
    grad_fn(m, data, g);
  } else {
    loss_and_grad(m, data, g);
  }

  // Parameter handles: (tensor, flat index) with 0 = W1, 1 = b1, 2 = w2, 3 = b2.
  std::vector<std::pair<int, std::size_t>> params;
  for (std::size_t k = 0; k < m.hidden; ++k) params.emplace_back(1, k);
  for (std::size_t k = 0; k < m.hidden; ++k) params.emplace_back(2, k);
  params.emplace_back(3, 0);
  std::set<uint32_t> rows;
  for (const auto& s : data) rows.insert(s.x.index.begin(), s.x.index.end());
  const std::vector<uint32_t> touched(rows.begin(), rows.end());
  Rng rng(splitmix64(seed));
  const std::size_t fixed = params.size();
  const std::size_t n_w1 = std::max(w1_samples, fixed < kMinGradCheck ? kMinGradCheck - fixed : 0);
  for (std::size_t i = 0; i < n_w1 && !touched.empty(); ++i) {
    const uint32_t r = touched[rng.below(touched.size())];
    params.emplace_back(0, static_cast<std::size_t>(r) * m.hidden + rng.below(m.hidden));
  }

  auto ref = [](ToyModel& t, int which, std::size_t i) -> double& {
    switch (which) {
      case 0: return t.W1[i];
      case 1: return t.b1[i];
      case 2: return t.w2[i];
      default: return t.b2;
    }
  };
  auto analytic = [&](int which, std::size_t i) {
    switch (which) {
      case 0: return g.W1[i];
      case 1: return g.b1[i];
      case 2: return g.w2[i];
      default: return g.b2;
    }
  };

  GradCheckResult res;
  ToyModel probe = m;
  for (const auto& [which, i] : params) {
    double& p = ref(probe, which, i);
    const double orig = p;
    p = orig + eps;
    const double up = loss(probe, data);
    p = orig - eps;
    const double down = loss(probe, data);
    p = orig;
    const double num = (up - down) / (2.0 * eps);
    const double a = analytic(which, i);
    const double rel = std::fabs(a - num) / std::max({std::fabs(a), std::fabs(num), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace taskvec::toy
