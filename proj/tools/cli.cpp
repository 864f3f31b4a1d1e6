// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/cli.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "taskvec/checkpoint.hpp"
#include "taskvec/error.hpp"
#include "taskvec/fair_metrics.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/kernels.hpp"
#include "taskvec/sweep.hpp"
#include "taskvec/task_arith.hpp"
#include "taskvec/toy_lab.hpp"

namespace taskvec::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

[[noreturn]] void usage_error(const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); }

bool is_usage_code(ErrorCode c) {
  return c == ErrorCode::kInvalidArgument || c == ErrorCode::kInvalidConfig || c == ErrorCode::kInvalidSpec;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

// ----------------------------------------------------------------- outputs ---

// Refuses directories and missing parents before any work starts.
void check_output_file(const fs::path& out) {
  if (out.empty()) usage_error("output path is empty");
  if (fs::is_directory(out)) usage_error("output '" + out.string() + "' is a directory");
  const fs::path parent = out.parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    usage_error("output directory '" + parent.string() + "' does not exist");
  }
}

fs::path manifest_path_for(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

// Command recorded in `dir`/manifest.json, empty when absent or unreadable.
std::string manifest_command(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_regular_file(dir / "manifest.json", ec)) return {};
  try {
    const auto j = ojson::parse(read_file_text(dir / "manifest.json"));
    return j.at("command").get<std::string>();
  } catch (const std::exception&) {
    return {};
  }
}

// Builds a directory next to `target` and renames it into place on commit.
// An existing non-empty target is replaced only when its manifest names the
// same command.
class StagedDir {
 public:
  StagedDir(fs::path target, const std::string& command) : target_(std::move(target)) {
    target_ = target_.lexically_normal();
    if (target_.filename().empty()) target_ = target_.parent_path();
    if (target_.empty()) usage_error("output directory is empty");
    if (fs::exists(target_)) {
      if (!fs::is_directory(target_)) usage_error("output '" + target_.string() + "' is not a directory");
      if (!fs::is_empty(target_) && manifest_command(target_) != command) {
        usage_error("refusing to replace '" + target_.string() + "': not an earlier " + command + " output");
      }
    }
    const fs::path parent = target_.parent_path();
    if (!parent.empty() && !fs::is_directory(parent)) {
      usage_error("output directory '" + parent.string() + "' does not exist");
    }
    const std::string tag = std::to_string(::getpid());
    staging_ = sibling(".tmp-" + tag);
    backup_ = sibling(".old-" + tag);
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (committed_) return;
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }

  const fs::path& path() const { return staging_; }
  const fs::path& target() const { return target_; }

  void commit() {
    if (fs::exists(target_)) {
      fs::rename(target_, backup_);
      fs::rename(staging_, target_);
      fs::remove_all(backup_);
    } else {
      fs::rename(staging_, target_);
    }
    committed_ = true;
  }

 private:
  fs::path sibling(const std::string& suffix) const {
    return target_.parent_path() / ("." + target_.filename().string() + suffix);
  }

  fs::path target_, staging_, backup_;
  bool committed_ = false;
};

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args)
      : command_(std::move(command)), args_(args), start_(std::chrono::steady_clock::now()) {}

  ojson config = ojson::object();

  void input(const fs::path& p) { inputs_.push_back(p); }

  // `label` is how the output is named in the manifest; `actual` is read.
  void output(const std::string& label, const fs::path& actual) { outputs_.emplace_back(label, actual); }

  std::string render() const {
    ojson j;
    j["command"] = command_;
    j["args"] = args_;
    j["config"] = config;
    j["inputs"] = ojson::array();
    for (const auto& p : inputs_) j["inputs"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    j["outputs"] = ojson::array();
    for (const auto& [label, p] : outputs_) j["outputs"].push_back({{"path", label}, {"sha256", sha256_file(p)}});
    j["tool_version"] = kToolVersion;
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start_;
    j["duration_seconds"] = dt.count();
    return j.dump(2) + "\n";
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::chrono::steady_clock::time_point start_;
  std::vector<fs::path> inputs_;
  std::vector<std::pair<std::string, fs::path>> outputs_;
};

void write_with_manifest(Manifest& m, const fs::path& out) {
  m.output(out.string(), out);
  write_file_atomic(manifest_path_for(out), m.render());
}

// Every regular file under the staged directory, in path order.
void add_tree_outputs(Manifest& m, const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) m.output(f.lexically_relative(root).generic_string(), f);
}

void finish_dir(Manifest& m, StagedDir& dir) {
  add_tree_outputs(m, dir.path());
  write_file_atomic(dir.path() / "manifest.json", m.render());
  dir.commit();
}

// ------------------------------------------------------------------ options ---

struct ArithFlags {
  bool intersect = false;
  std::string out_dtype;

  ApplyOptions apply_options() const {
    ApplyOptions o;
    if (intersect) o.match.mode = MatchMode::kIntersect;
    if (!out_dtype.empty()) o.out_dtype = parse_dtype(out_dtype);
    return o;
  }
  void describe(ojson& c) const {
    c["match"] = intersect ? "intersect" : "strict";
    c["out_dtype"] = out_dtype.empty() ? ojson(nullptr) : ojson(out_dtype);
  }
};

void add_arith_flags(CLI::App* sub, ArithFlags& f, bool with_dtype) {
  sub->add_flag("--intersect", f.intersect, "Operate on shared tensor names only instead of requiring equal name sets");
  if (with_dtype) {
    sub->add_option("--out-dtype", f.out_dtype, "Output dtype (F32, F16, BF16); default keeps the base dtype")
        ->check(CLI::IsMember({"F32", "F16", "BF16"}));
  }
}

double parse_lambda(const std::string& text, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
    usage_error(what + ": '" + text + "' is not a finite number");
  }
  return v;
}

struct VecSpec {
  fs::path path;
  double lambda = 0.0;
};

VecSpec parse_vec_spec(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0) usage_error("--vec '" + text + "' must look like <path>:<lambda>");
  VecSpec v{text.substr(0, colon), parse_lambda(text.substr(colon + 1), "--vec " + text.substr(0, colon))};
  if (!fs::is_regular_file(v.path)) usage_error("--vec file '" + v.path.string() + "' does not exist");
  return v;
}

// -------------------------------------------------------------- sweep config ---

void check_keys(const ojson& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw Error(ErrorCode::kInvalidConfig, where + ": unknown field '" + k + "'");
  }
}

struct SweepInputs {
  uint64_t seed = 0;
  fs::path anchor;
  std::vector<fs::path> vectors;
  std::map<std::string, fs::path> eval;  // split -> examples JSONL
};

struct SweepPlan {
  sweep::PipelineConfig pipeline;
  std::vector<SweepInputs> inputs;  // empty: train from `pipeline.corpus`
  ojson resolved;
};

fs::path resolve_against(const fs::path& base_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

SweepPlan load_sweep_config(const fs::path& path, const std::string& mode) {
  SweepPlan plan;
  auto& pc = plan.pipeline;
  ojson j;
  try {
    j = ojson::parse(read_file_text(path));
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, "sweep config " + path.string() + ": " + e.what());
  }
  check_keys(j,
             {"grid", "seeds", "attribute", "criterion", "plot_split", "corpus", "inputs", "training", "dim", "hidden",
              "lora", "worst_k", "exclusions", "worst_split"},
             "sweep config");
  try {
    if (j.contains("grid")) pc.sweep.grid = j["grid"].get<std::vector<double>>();
    if (pc.sweep.grid.empty()) pc.sweep.grid = mode == "merge" ? sweep::default_merge_grid() : sweep::default_inject_grid();
    if (j.contains("seeds")) pc.sweep.seeds = j["seeds"].get<std::vector<uint64_t>>();
    if (j.contains("criterion")) pc.sweep.criterion = j["criterion"].get<std::string>();
    if (j.contains("plot_split")) pc.sweep.plot_split = j["plot_split"].get<std::string>();
    if (j.contains("worst_k")) pc.worst_k = j["worst_k"].get<std::size_t>();
    if (j.contains("exclusions")) pc.exclusions = j["exclusions"].get<std::vector<std::string>>();
    if (j.contains("worst_split")) pc.worst_split = j["worst_split"].get<std::string>();

    const bool has_corpus = j.contains("corpus"), has_inputs = j.contains("inputs");
    if (has_corpus == has_inputs) throw Error(ErrorCode::kInvalidConfig, "sweep config needs exactly one of 'corpus' or 'inputs'");
    if (has_corpus) {
      const auto& c = j["corpus"];
      pc.corpus = c.is_string() ? toy::spec_from_json(ojson{{"preset", c.get<std::string>()}}.dump())
                                : toy::spec_from_json(c.dump());
      pc.sweep.attribute = pc.corpus.attribute;
      if (j.contains("attribute") && j["attribute"].get<std::string>() != pc.corpus.attribute) {
        throw Error(ErrorCode::kInvalidConfig, "sweep config: attribute differs from the corpus attribute");
      }
      if (j.contains("training")) {
        const auto& t = j["training"];
        check_keys(t, {"epochs", "learning_rate", "batch_size"}, "training");
        if (t.contains("epochs")) pc.hyper.epochs = t["epochs"].get<uint32_t>();
        if (t.contains("learning_rate")) pc.hyper.learning_rate = t["learning_rate"].get<double>();
        if (t.contains("batch_size")) pc.hyper.batch_size = t["batch_size"].get<uint32_t>();
      }
      if (j.contains("dim")) pc.dim = j["dim"].get<uint32_t>();
      if (j.contains("hidden")) pc.hidden = j["hidden"].get<uint32_t>();
      if (j.contains("lora")) {
        const auto& l = j["lora"];
        if (l.is_boolean()) {
          pc.lora = l.get<bool>();
        } else {
          check_keys(l, {"rank", "alpha", "init_sd"}, "lora");
          if (l.contains("rank")) pc.lora_options.rank = l["rank"].get<uint32_t>();
          if (l.contains("alpha")) pc.lora_options.alpha = l["alpha"].get<double>();
          if (l.contains("init_sd")) pc.lora_options.init_sd = l["init_sd"].get<double>();
        }
      }
      if (pc.dim == 0 || pc.hidden == 0) throw Error(ErrorCode::kInvalidConfig, "dim and hidden must be positive");
    } else {
      for (const char* k : {"training", "dim", "hidden", "lora"}) {
        if (j.contains(k)) throw Error(ErrorCode::kInvalidConfig, std::string("sweep config: '") + k + "' needs 'corpus'");
      }
      if (j.contains("attribute")) pc.sweep.attribute = j["attribute"].get<std::string>();
      const fs::path dir = path.parent_path();
      std::vector<uint64_t> seeds;
      for (const auto& in : j["inputs"]) {
        check_keys(in, {"seed", "anchor", "vectors", "eval"}, "inputs entry");
        SweepInputs s;
        s.seed = in.at("seed").get<uint64_t>();
        s.anchor = resolve_against(dir, in.at("anchor").get<std::string>());
        for (const auto& v : in.at("vectors")) s.vectors.push_back(resolve_against(dir, v.get<std::string>()));
        for (const auto& [split, p] : in.at("eval").items()) s.eval[split] = resolve_against(dir, p.get<std::string>());
        if (mode == "inject" && s.vectors.size() != 1) {
          throw Error(ErrorCode::kInvalidConfig, "inject inputs need exactly one vector per seed");
        }
        if (s.vectors.empty()) throw Error(ErrorCode::kInvalidConfig, "inputs entry has no vectors");
        std::vector<fs::path> files{s.anchor};
        files.insert(files.end(), s.vectors.begin(), s.vectors.end());
        for (const auto& [_, p] : s.eval) files.push_back(p);
        for (const auto& f : files) {
          if (!fs::is_regular_file(f)) throw Error(ErrorCode::kInvalidConfig, "input file '" + f.string() + "' does not exist");
        }
        seeds.push_back(s.seed);
        plan.inputs.push_back(std::move(s));
      }
      if (plan.inputs.empty()) throw Error(ErrorCode::kInvalidConfig, "'inputs' is empty");
      if (j.contains("seeds") && pc.sweep.seeds != seeds) {
        throw Error(ErrorCode::kInvalidConfig, "'seeds' must list the input seeds in order");
      }
      pc.sweep.seeds = seeds;
    }
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, "sweep config " + path.string() + ": " + e.what());
  }
  pc.sweep.validate();

  auto& r = plan.resolved;
  r["mode"] = mode;
  r["grid"] = pc.sweep.grid;
  r["seeds"] = pc.sweep.seeds;
  r["attribute"] = pc.sweep.attribute;
  r["criterion"] = pc.sweep.criterion;
  r["plot_split"] = pc.sweep.plot_split;
  if (plan.inputs.empty()) {
    r["corpus"] = ojson::parse(toy::spec_to_json(pc.corpus));
    r["training"] = {{"epochs", pc.hyper.epochs}, {"learning_rate", pc.hyper.learning_rate}, {"batch_size", pc.hyper.batch_size}};
    r["dim"] = pc.dim;
    r["hidden"] = pc.hidden;
    r["lora"] = pc.lora ? ojson{{"rank", pc.lora_options.rank}, {"alpha", pc.lora_options.alpha}, {"init_sd", pc.lora_options.init_sd}}
                        : ojson(false);
    if (mode == "inject") {
      r["worst_k"] = pc.worst_k;
      r["exclusions"] = pc.exclusions;
      r["worst_split"] = pc.worst_split;
    }
  }
  return plan;
}

std::string dir_name_for(const std::string& group) {
  std::string s;
  for (unsigned char c : group) s += std::isalnum(c) || c == '-' || c == '_' ? static_cast<char>(c) : '_';
  return s.empty() ? "_" : s;
}

// -------------------------------------------------------------- subcommands ---

struct Opts {
  int threads = 0;

  std::string a, b, out;
  double lambda = 0.0;
  std::vector<std::string> vecs;
  ArithFlags arith;

  std::string preds, attribute;
  double threshold = kDefaultThreshold;
  std::string format = "json";

  std::string spec;
  std::optional<uint64_t> seed_override;

  std::string data, split = "train", group, init, save_init, adapter_out;
  bool lora = false;
  uint32_t rank = 8;
  double alpha = 16.0;
  uint64_t seed = 0;
  toy::TrainHyper hyper;
  uint32_t dim = toy::kDefaultDim, hidden = toy::kDefaultHidden;

  std::string mode, config;
  std::vector<std::string> formats{"json", "csv", "svg"};
};

void cmd_diff(const Opts& o, Manifest& m) {
  check_output_file(o.out);
  m.config["match"] = o.arith.intersect ? "intersect" : "strict";
  m.input(o.a);
  m.input(o.b);
  const TaskVector tv = diff(read_checkpoint(o.a), read_checkpoint(o.b), o.arith.apply_options().match);
  write_checkpoint(tv.to_checkpoint(), o.out);
  write_with_manifest(m, o.out);
}

void cmd_apply(const Opts& o, Manifest& m, bool inject_mode) {
  check_output_file(o.out);
  if (!std::isfinite(o.lambda)) usage_error("--lambda must be finite");
  const ApplyOptions opts = o.arith.apply_options();
  m.config["lambda"] = o.lambda;
  o.arith.describe(m.config);
  m.input(o.a);
  m.input(o.b);
  const Checkpoint anchor = read_checkpoint(o.a);
  const TaskVector tv = TaskVector::from_checkpoint(read_checkpoint(o.b));
  const Checkpoint out = inject_mode ? inject(anchor, tv, o.lambda, opts) : apply(anchor, scale(tv, o.lambda), opts);
  write_checkpoint(out, o.out);
  write_with_manifest(m, o.out);
}

void cmd_merge(const Opts& o, Manifest& m) {
  check_output_file(o.out);
  std::vector<VecSpec> specs;
  for (const auto& v : o.vecs) specs.push_back(parse_vec_spec(v));
  const ApplyOptions opts = o.arith.apply_options();
  o.arith.describe(m.config);
  m.input(o.a);
  m.config["vectors"] = ojson::array();
  std::vector<WeightedVector> parts;
  for (const auto& s : specs) {
    m.input(s.path);
    m.config["vectors"].push_back({{"path", s.path.string()}, {"lambda", s.lambda}});
  }
  const Checkpoint base = read_checkpoint(o.a);
  for (const auto& s : specs) parts.push_back({TaskVector::from_checkpoint(read_checkpoint(s.path)), s.lambda});
  write_checkpoint(merge(base, parts, opts), o.out);
  write_with_manifest(m, o.out);
}

void cmd_eval(const Opts& o, Manifest& m, std::ostream& out) {
  if (!std::isfinite(o.threshold)) usage_error("--threshold must be finite");
  if (!o.out.empty()) check_output_file(o.out);
  m.config = {{"attribute", o.attribute}, {"threshold", o.threshold}, {"format", o.format}};
  m.input(o.preds);
  const GroupReport rep = evaluate(read_predictions(o.preds), o.attribute, o.threshold);
  const std::string text = o.format == "csv" ? report_to_csv(rep) : report_to_json(rep) + "\n";
  if (o.out.empty()) {
    out << text;
    return;
  }
  write_file_atomic(o.out, text);
  write_with_manifest(m, o.out);
}

void cmd_predict(const Opts& o, Manifest& m, std::ostream& out) {
  if (!o.out.empty()) check_output_file(o.out);
  m.input(o.a);
  m.input(o.data);
  const auto records = toy::predict(read_checkpoint(o.a), toy::parse_examples(read_file_text(o.data)));
  const std::string text = format_predictions(records);
  if (o.out.empty()) {
    out << text;
    return;
  }
  write_file_atomic(o.out, text);
  write_with_manifest(m, o.out);
}

void cmd_gen_data(const Opts& o, Manifest& m) {
  toy::CorpusSpec spec = toy::spec_from_json(read_file_text(o.spec));
  if (o.seed_override) spec.seed = *o.seed_override;
  spec.validate();
  StagedDir dir(o.out, "gen-data");
  m.input(o.spec);
  m.config = ojson::parse(toy::spec_to_json(spec));
  toy::write_corpus(dir.path(), toy::gen_corpus(spec), &spec);
  finish_dir(m, dir);
}

void cmd_train_toy(const Opts& o, Manifest& m) {
  check_output_file(o.out);
  if (!o.save_init.empty()) check_output_file(o.save_init);
  if (!o.adapter_out.empty()) check_output_file(o.adapter_out);
  if (o.split != "train" && o.split != "test") usage_error("--split must be train or test");
  if (o.dim == 0 || o.hidden == 0) usage_error("--dim and --hidden must be positive");
  const fs::path data_dir(o.data);
  std::string attribute = o.attribute;
  if (attribute.empty()) {
    attribute = fs::exists(data_dir / "spec.json") ? toy::spec_from_json(read_file_text(data_dir / "spec.json")).attribute
                                                   : "gender";
  }
  toy::TrainHyper hyper = o.hyper;
  hyper.seed = o.seed;

  m.config = {{"split", o.split},         {"attribute", attribute}, {"group", o.group.empty() ? ojson(nullptr) : ojson(o.group)},
              {"seed", o.seed},           {"epochs", hyper.epochs}, {"learning_rate", hyper.learning_rate},
              {"batch_size", hyper.batch_size}};
  if (o.lora) m.config["lora"] = {{"rank", o.rank}, {"alpha", o.alpha}};
  m.input(data_dir / (o.split + ".jsonl"));

  const toy::Corpus corpus = toy::read_corpus(data_dir);
  const auto& data = o.split == "train" ? corpus.train : corpus.test;
  Checkpoint init;
  if (!o.init.empty()) {
    m.input(o.init);
    init = read_checkpoint(o.init);
  } else {
    m.config["dim"] = o.dim;
    m.config["hidden"] = o.hidden;
    const std::string s = std::to_string(o.seed);
    init = toy::init_model(o.seed, o.dim, o.hidden)
               .to_checkpoint({{kIdKey, "base:s" + s}, {toy::kMetaKind, "base"}, {toy::kMetaSeed, s}});
  }

  if (o.lora) {
    toy::LoraOptions lo;
    lo.rank = o.rank;
    lo.alpha = o.alpha;
    std::vector<toy::Example> subset = o.group.empty() ? data : toy::filter_group(data, attribute, o.group);
    if (subset.empty()) throw Error(ErrorCode::kEmptyGroup, "group '" + o.group + "' has no examples");
    const auto res = toy::train_lora(subset, init, lo, hyper);
    write_checkpoint(res.merged, o.out);
    if (!o.adapter_out.empty()) {
      write_checkpoint(res.adapter.to_checkpoint(), o.adapter_out);
      m.output(o.adapter_out, o.adapter_out);
    }
  } else if (!o.group.empty()) {
    write_checkpoint(toy::train_subgroup(data, attribute, o.group, init, hyper), o.out);
  } else {
    write_checkpoint(toy::train(data, init, hyper), o.out);
  }
  if (!o.save_init.empty()) {
    write_checkpoint(init, o.save_init);
    m.output(o.save_init, o.save_init);
  }
  write_with_manifest(m, o.out);
}

void cmd_sweep(const Opts& o, Manifest& m) {
  SweepPlan plan = load_sweep_config(o.config, o.mode);
  StagedDir dir(o.out, "sweep");
  m.input(o.config);
  m.config = plan.resolved;
  m.config["formats"] = o.formats;
  const auto& pc = plan.pipeline;

  if (!plan.inputs.empty()) {
    std::vector<sweep::Arm> arms;
    for (const auto& in : plan.inputs) {
      sweep::Arm arm;
      arm.seed = in.seed;
      m.input(in.anchor);
      arm.anchor = read_checkpoint(in.anchor);
      for (const auto& v : in.vectors) {
        m.input(v);
        arm.vectors.push_back(TaskVector::from_checkpoint(read_checkpoint(v)));
      }
      for (const auto& [split, p] : in.eval) {
        m.input(p);
        arm.eval[split] = toy::parse_examples(read_file_text(p));
      }
      arms.push_back(std::move(arm));
    }
    sweep::SweepResult res =
        o.mode == "merge" ? sweep::lambda_sweep(arms, pc.sweep) : sweep::inject_sweep(arms, pc.sweep);
    res.selected_lambda = sweep::select_lambda(res, pc.sweep.criterion);
    sweep::emit(res, dir.path(), o.formats);
  } else {
    const auto models = sweep::train_all(pc);
    if (o.mode == "merge") {
      sweep::emit(sweep::run_merge(pc, models), dir.path(), o.formats);
    } else {
      const auto run = sweep::run_inject(pc, models);
      ojson w;
      w["split"] = pc.worst_split;
      w["exclusions"] = pc.exclusions;
      w["worst"] = ojson::array();
      std::set<std::string> used;
      for (const auto& g : run.worst) {
        const std::string d = dir_name_for(g);
        if (!used.insert(d).second) throw Error(ErrorCode::kInvalidConfig, "group names collide as directory '" + d + "'");
        w["worst"].push_back({{"group", g}, {"dir", "inject/" + d}});
        sweep::emit(run.per_group.at(g), dir.path() / "inject" / d, o.formats);
      }
      w["scores"] = ojson::array();
      for (const auto& s : run.scores) {
        w["scores"].push_back({{"group", s.group}, {"score", s.score ? ojson(*s.score) : ojson(nullptr)}, {"n", s.n}});
      }
      write_file_atomic(dir.path() / "worst.json", w.dump(2) + "\n");
    }
  }
  finish_dir(m, dir);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Opts o;
  CLI::App app{"Task-vector arithmetic, subgroup fairness metrics and coefficient sweeps.", "taskvec"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.footer(
      "Exit status: 0 success, 1 runtime error, 2 invalid arguments or configuration.\n"
      "TASKVEC_THREADS sets the default worker count.");
  app.add_option("--threads", o.threads, "Worker threads (default: TASKVEC_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  auto* c_diff = app.add_subcommand("diff", "Task vector: task checkpoint minus base checkpoint");
  c_diff->add_option("task", o.a, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  c_diff->add_option("base", o.b, "Base checkpoint")->required()->check(CLI::ExistingFile);
  c_diff->add_option("-o,--output", o.out, "Output task-vector checkpoint")->required();
  add_arith_flags(c_diff, o.arith, false);

  auto* c_apply = app.add_subcommand("apply", "Add a scaled task vector to a base checkpoint");
  c_apply->add_option("base", o.a, "Base checkpoint")->required()->check(CLI::ExistingFile);
  c_apply->add_option("vector", o.b, "Task-vector checkpoint")->required()->check(CLI::ExistingFile);
  c_apply->add_option("--lambda", o.lambda, "Scaling coefficient")->required();
  c_apply->add_option("-o,--output", o.out, "Output checkpoint")->required();
  add_arith_flags(c_apply, o.arith, true);

  auto* c_merge = app.add_subcommand("merge", "Base plus a weighted sum of task vectors");
  c_merge->add_option("base", o.a, "Base checkpoint")->required()->check(CLI::ExistingFile);
  c_merge->add_option("--vec", o.vecs, "Task vector and coefficient as <path>:<lambda>; repeatable, order kept")
      ->required()
      ->take_all()
      ->allow_extra_args(false);
  c_merge->add_option("-o,--output", o.out, "Output checkpoint")->required();
  add_arith_flags(c_merge, o.arith, true);

  auto* c_inject = app.add_subcommand("inject", "Add a scaled subgroup vector to a fine-tuned checkpoint");
  c_inject->add_option("sft", o.a, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  c_inject->add_option("vector", o.b, "Subgroup task-vector checkpoint")->required()->check(CLI::ExistingFile);
  c_inject->add_option("--lambda", o.lambda, "Scaling coefficient")->required();
  c_inject->add_option("-o,--output", o.out, "Output checkpoint")->required();
  add_arith_flags(c_inject, o.arith, true);

  auto* c_eval = app.add_subcommand("eval", "Subgroup fairness report for a predictions file");
  c_eval->add_option("--preds", o.preds, "Predictions JSONL")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--attribute", o.attribute, "Protected attribute to group by")->required();
  c_eval->add_option("--threshold", o.threshold, "Positive when score >= threshold")->capture_default_str();
  c_eval->add_option("--format", o.format, "Report format")->capture_default_str()->check(CLI::IsMember({"json", "csv"}));
  c_eval->add_option("-o,--output", o.out, "Write the report here instead of standard output");

  auto* c_predict = app.add_subcommand("predict", "Score an examples file with a toy checkpoint");
  c_predict->add_option("--ckpt", o.a, "Toy model checkpoint")->required()->check(CLI::ExistingFile);
  c_predict->add_option("--data", o.data, "Examples JSONL")->required()->check(CLI::ExistingFile);
  c_predict->add_option("-o,--output", o.out, "Write predictions here instead of standard output");

  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic corpus with train and test splits");
  c_gen->add_option("--spec", o.spec, "Corpus spec JSON")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--seed", o.seed_override, "Override the spec seed");
  c_gen->add_option("-o,--output", o.out, "Output directory")->required();

  auto* c_train = app.add_subcommand("train-toy", "Train the toy classifier on a generated corpus");
  c_train->add_option("--data", o.data, "Corpus directory from gen-data")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--split", o.split, "Split to train on")->capture_default_str()->check(CLI::IsMember({"train", "test"}));
  c_train->add_option("--attribute", o.attribute, "Attribute for --group (default: the corpus spec attribute)");
  c_train->add_option("--group", o.group, "Train on this subgroup only");
  auto* lora_flag = c_train->add_flag("--lora", o.lora, "Train a low-rank adapter on W1 and write the merged model");
  c_train->add_option("--rank", o.rank, "Adapter rank")->capture_default_str()->needs(lora_flag)->check(CLI::PositiveNumber);
  c_train->add_option("--alpha", o.alpha, "Adapter scale numerator (scale = alpha / rank)")->capture_default_str()->needs(lora_flag);
  c_train->add_option("--adapter-out", o.adapter_out, "Also write the adapter factors")->needs(lora_flag);
  c_train->add_option("--seed", o.seed, "Seed for initialization and shuffling")->required();
  c_train->add_option("--epochs", o.hyper.epochs, "Training epochs")->capture_default_str();
  c_train->add_option("--lr", o.hyper.learning_rate, "Learning rate")->capture_default_str();
  c_train->add_option("--batch", o.hyper.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  auto* init_opt = c_train->add_option("--init", o.init, "Start from this checkpoint instead of a seeded one")
                       ->check(CLI::ExistingFile);
  c_train->add_option("--dim", o.dim, "Hashed feature dimension")->capture_default_str()->excludes(init_opt);
  c_train->add_option("--hidden", o.hidden, "Hidden units")->capture_default_str()->excludes(init_opt);
  c_train->add_option("--save-init", o.save_init, "Also write the starting checkpoint");
  c_train->add_option("-o,--output", o.out, "Output checkpoint")->required();

  auto* c_sweep = app.add_subcommand("sweep", "Coefficient sweep across seeds into a run directory");
  c_sweep->add_option("--mode", o.mode, "merge or inject")->required()->check(CLI::IsMember({"merge", "inject"}));
  c_sweep->add_option("--config", o.config, "Sweep config JSON")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--formats", o.formats, "Comma-separated subset of json,csv,svg")->capture_default_str()
      ->delimiter(',')
      ->check(CLI::IsMember({"json", "csv", "svg"}));
  c_sweep->add_option("-o,--output", o.out, "Run directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "taskvec: error[Usage]: " << one_line(e.what()) << "\n\n" << app.help();
    return kExitUsage;
  }

  std::string name;
  for (const auto* sub : app.get_subcommands()) name = sub->get_name();
  Manifest manifest(name, args);
  try {
    if (o.threads > 0) {
      kernels::set_threads(o.threads);
    } else {
      kernels::configure_threads_from_env();
    }
    if (c_diff->parsed()) cmd_diff(o, manifest);
    if (c_apply->parsed()) cmd_apply(o, manifest, false);
    if (c_merge->parsed()) cmd_merge(o, manifest);
    if (c_inject->parsed()) cmd_apply(o, manifest, true);
    if (c_eval->parsed()) cmd_eval(o, manifest, out);
    if (c_predict->parsed()) cmd_predict(o, manifest, out);
    if (c_gen->parsed()) cmd_gen_data(o, manifest);
    if (c_train->parsed()) cmd_train_toy(o, manifest);
    if (c_sweep->parsed()) cmd_sweep(o, manifest);
  } catch (const Error& e) {
    err << "taskvec " << name << ": error[" << error_code_name(e.code()) << "]: " << one_line(e.what()) << "\n";
    return is_usage_code(e.code()) ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "taskvec " << name << ": error[Internal]: " << one_line(e.what()) << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace taskvec::cli
