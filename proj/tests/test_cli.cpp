// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "taskvec/checkpoint.hpp"
#include "taskvec/cli.hpp"
#include "taskvec/fair_metrics.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/task_arith.hpp"

namespace fs = std::filesystem;
using namespace taskvec;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("taskvec_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }
  std::vector<std::string> listing() const {
    std::vector<std::string> names;
    for (const auto& e : fs::recursive_directory_iterator(path_)) names.push_back(e.path().lexically_relative(path_).string());
    std::sort(names.begin(), names.end());
    return names;
  }

 private:
  fs::path path_;
};

void write_ckpt(const std::string& path, std::vector<float> w, std::vector<float> b, const std::string& id) {
  Checkpoint c({{"b", Tensor::from_f32({b.size()}, b)}, {"w", Tensor::from_f32({2, w.size() / 2}, w)}}, {{kIdKey, id}});
  write_checkpoint(c, path);
}

// Every regular file below `root` except manifests, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = e.path().lexically_relative(root).generic_string();
    files[rel] = read_file_text(e.path());
  }
  return files;
}

json without_duration(const std::string& manifest) {
  json j = json::parse(manifest);
  CHECK(j.contains("duration_seconds"));
  j.erase("duration_seconds");
  return j;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"diff", "apply", "merge", "inject", "eval", "predict", "gen-data", "train-toy", "sweep"};
  return s;
}

std::string golden_path(const std::string& name) { return std::string(TASKVEC_GOLDEN_DIR) + "/help_" + name + ".txt"; }

// Golden files open with a block of "# " license lines that is not part of
// the expected output.
constexpr const char* kGoldenHeader = "# Copyright 2026 The taskvec Authors\n# SPDX-License-Identifier: Apache-2.0\n";

std::string read_golden(const std::string& name) {
  std::string text = read_file_text(golden_path(name));
  while (text.rfind("# ", 0) == 0) text.erase(0, text.find('\n') + 1);
  return text;
}

}  // namespace

TEST_CASE("help output matches the golden files") {
  std::vector<std::pair<std::string, std::vector<std::string>>> cases{{"taskvec", {"--help"}}};
  for (const auto& s : subcommands()) cases.push_back({s, {s, "--help"}});
  const bool update = std::getenv("TASKVEC_UPDATE_GOLDEN") != nullptr;
  for (const auto& [name, args] : cases) {
    CAPTURE(name);
    const auto r = run(args);
    CHECK(r.code == 0);
    CHECK(r.err.empty());
    if (update) write_file_atomic(golden_path(name), kGoldenHeader + r.out);
    CHECK(r.out == read_golden(name));
  }
}

TEST_CASE("help enumerates every flag") {
  const std::map<std::string, std::vector<std::string>> flags{
      {"diff", {"-o,--output", "--intersect"}},
      {"apply", {"--lambda", "-o,--output", "--intersect", "--out-dtype"}},
      {"merge", {"--vec", "-o,--output", "--intersect", "--out-dtype"}},
      {"inject", {"--lambda", "-o,--output", "--intersect", "--out-dtype"}},
      {"eval", {"--preds", "--attribute", "--threshold", "--format", "-o,--output"}},
      {"predict", {"--ckpt", "--data", "-o,--output"}},
      {"gen-data", {"--spec", "--seed", "-o,--output"}},
      {"train-toy",
       {"--data", "--split", "--attribute", "--group", "--lora", "--rank", "--alpha", "--adapter-out", "--seed",
        "--epochs", "--lr", "--batch", "--init", "--dim", "--hidden", "--save-init", "-o,--output"}},
      {"sweep", {"--mode", "--config", "--formats", "-o,--output"}},
  };
  CHECK(flags.size() == subcommands().size());
  for (const auto& [sub, list] : flags) {
    const auto r = run({sub, "--help"});
    for (const auto& f : list) {
      CAPTURE(sub);
      CAPTURE(f);
      CHECK(r.out.find(f) != std::string::npos);
    }
  }
  const auto top = run({"--help"});
  for (const auto& s : subcommands()) CHECK(top.out.find("  " + s) != std::string::npos);
  CHECK(top.out.find("--threads") != std::string::npos);
  CHECK(top.out.find("--version") != std::string::npos);
  CHECK(run({"--version"}).out == std::string(cli::kToolVersion) + "\n");
}

TEST_CASE("merge at zero then diff gives the all-zero vector") {
  TempDir d;
  write_ckpt(d / "base.ckpt", {1.5f, -2.f, 0.25f, 8.f}, {0.5f}, "base");
  write_ckpt(d / "task.ckpt", {1.f, 2.f, 3.f, -4.f}, {7.f}, "task");
  REQUIRE(run({"diff", d / "task.ckpt", d / "base.ckpt", "-o", d / "a.vec"}).code == 0);
  REQUIRE(run({"merge", d / "base.ckpt", "--vec", d / "a.vec:0.0", "-o", d / "out.ckpt"}).code == 0);
  REQUIRE(run({"diff", d / "out.ckpt", d / "base.ckpt", "-o", d / "zero.vec"}).code == 0);
  const auto zero = TaskVector::from_checkpoint(read_checkpoint(d / "zero.vec"));
  REQUIRE(zero.deltas().size() == 2);
  for (const auto& [name, t] : zero.deltas()) {
    for (float v : t.f32()) CHECK(v == 0.0f);
  }
  // The merged file is the base tensors bit for bit.
  CHECK(read_checkpoint(d / "out.ckpt").tensors() == read_checkpoint(d / "base.ckpt").tensors());
}

TEST_CASE("apply, inject and merge agree on one vector") {
  TempDir d;
  write_ckpt(d / "base.ckpt", {1.5f, -2.f, 0.25f, 8.f}, {0.5f}, "base");
  write_ckpt(d / "task.ckpt", {1.f, 2.f, 3.f, -4.f}, {7.f}, "task");
  REQUIRE(run({"diff", d / "task.ckpt", d / "base.ckpt", "-o", d / "v"}).code == 0);
  REQUIRE(run({"inject", d / "base.ckpt", d / "v", "--lambda", "0.3", "-o", d / "i"}).code == 0);
  REQUIRE(run({"merge", d / "base.ckpt", "--vec", d / "v:0.3", "-o", d / "m"}).code == 0);
  REQUIRE(run({"apply", d / "base.ckpt", d / "v", "--lambda", "1", "-o", d / "a"}).code == 0);
  CHECK(read_checkpoint(d / "i").tensors() == read_checkpoint(d / "m").tensors());
  const auto a = read_checkpoint(d / "a");
  CHECK(a.at("w").f32()[3] == -4.f);
  CHECK(a.at("b").f32()[0] == 7.f);
  REQUIRE(run({"merge", d / "base.ckpt", "--vec", d / "v:0.5", "--vec", d / "v:0.5", "--out-dtype", "F16", "-o", d / "h"}).code == 0);
  CHECK(read_checkpoint(d / "h").at("w").dtype() == DType::kF16);
}

TEST_CASE("eval prints the demographic parity of a hand-built file") {
  TempDir d;
  std::vector<PredictionRecord> recs;
  // a: 3 of 4 selected, b: 1 of 4 selected.
  for (int i = 0; i < 8; ++i) {
    PredictionRecord r;
    r.id = "r" + std::to_string(i);
    r.y_true = i % 2;
    r.score = (i < 4 ? i < 3 : i == 4) ? 0.9 : 0.1;
    r.groups["sex"] = i < 4 ? "a" : "b";
    recs.push_back(r);
  }
  write_file_atomic(d / "p.jsonl", format_predictions(recs));
  const auto r = run({"eval", "--preds", d / "p.jsonl", "--attribute", "sex"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["overall"]["dpd"].get<double>() == 0.5);

  const auto csv = run({"eval", "--preds", d / "p.jsonl", "--attribute", "sex", "--format", "csv", "-o", d / "r.csv"});
  CHECK(csv.code == 0);
  CHECK(csv.out.empty());
  CHECK(read_file_text(d / "r.csv") == report_to_csv(evaluate(recs, "sex")));
  CHECK(fs::exists(d / "r.csv.manifest.json"));

  const auto missing = run({"eval", "--preds", d / "p.jsonl", "--attribute", "race"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("MissingAttribute") != std::string::npos);
}

TEST_CASE("invalid invocations exit 2 and write nothing") {
  TempDir d;
  write_ckpt(d / "base.ckpt", {1, 2, 3, 4}, {0}, "base");
  const auto before = d.listing();
  auto expect_usage = [&](std::vector<std::string> args) {
    CAPTURE(args.size() > 0 ? args[0] : "");
    const auto r = run(args);
    CHECK(r.code == 2);
    CHECK(r.out.empty());
    CHECK(r.err.find("error") != std::string::npos);
    CHECK(d.listing() == before);
    return r;
  };
  const auto unknown = expect_usage({"merge", d / "base.ckpt", "--vec", d / "base.ckpt:1", "--bogus", "-o", d / "x"});
  CHECK(unknown.err.find("Usage: taskvec merge") != std::string::npos);
  CHECK(unknown.err.find("--bogus") != std::string::npos);
  expect_usage({});
  expect_usage({"frobnicate"});
  expect_usage({"diff", d / "missing.ckpt", d / "base.ckpt", "-o", d / "x"});
  expect_usage({"apply", d / "base.ckpt", d / "base.ckpt", "--lambda", "nan", "-o", d / "x"});
  expect_usage({"apply", d / "base.ckpt", d / "base.ckpt", "--lambda", "abc", "-o", d / "x"});
  expect_usage({"merge", d / "base.ckpt", "--vec", d / "base.ckpt", "-o", d / "x"});
  expect_usage({"merge", d / "base.ckpt", "--vec", d / "base.ckpt:inf", "-o", d / "x"});
  expect_usage({"merge", d / "base.ckpt", "--vec", d / "nope:1", "-o", d / "x"});
  expect_usage({"diff", d / "base.ckpt", d / "base.ckpt", "-o", d / "no/such/dir/x"});
  expect_usage({"diff", d / "base.ckpt", d / "base.ckpt", "-o", d.path().string()});
  expect_usage({"eval", "--preds", d / "base.ckpt"});
  expect_usage({"train-toy", "--data", d.path().string(), "--seed", "1", "--rank", "4", "-o", d / "x"});
  expect_usage({"sweep", "--mode", "both", "--config", d / "base.ckpt", "-o", d / "run"});
  expect_usage({"sweep", "--mode", "merge", "--config", d / "base.ckpt", "--formats", "png", "-o", d / "run"});
  expect_usage({"--threads", "0", "diff", d / "base.ckpt", d / "base.ckpt", "-o", d / "x"});
}

TEST_CASE("runtime errors exit 1, name the tensor and leave no output") {
  TempDir d;
  write_ckpt(d / "base.ckpt", {1, 2, 3, 4}, {0}, "base");
  write_ckpt(d / "wide.ckpt", {1, 2, 3, 4, 5, 6}, {0}, "wide");
  const auto r = run({"diff", d / "wide.ckpt", d / "base.ckpt", "-o", d / "v"});
  CHECK(r.code == 1);
  CHECK(r.err.find("ShapeMismatch") != std::string::npos);
  CAPTURE(r.err);
  CHECK(r.err.find("tensor 'w': [2,3] vs [2,2]") != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  CHECK_FALSE(fs::exists(d / "v"));
  CHECK_FALSE(fs::exists(d / "v.manifest.json"));

  write_file_atomic(d / "junk.ckpt", std::string("\x05\x00\x00\x00\x00\x00\x00\x00{}", 13));
  const auto bad = run({"diff", d / "junk.ckpt", d / "base.ckpt", "-o", d / "v"});
  CHECK(bad.code == 1);
  CHECK_FALSE(fs::exists(d / "v"));
}

TEST_CASE("manifests record digests of inputs and outputs") {
  TempDir d;
  write_ckpt(d / "base.ckpt", {1, 2, 3, 4}, {0}, "base");
  write_ckpt(d / "task.ckpt", {2, 2, 3, 4}, {1}, "task");
  REQUIRE(run({"diff", d / "task.ckpt", d / "base.ckpt", "-o", d / "v"}).code == 0);
  const auto m = json::parse(read_file_text(d / "v.manifest.json"));
  CHECK(m["command"] == "diff");
  CHECK(m["tool_version"] == cli::kToolVersion);
  CHECK(m["duration_seconds"].get<double>() >= 0.0);
  REQUIRE(m["inputs"].size() == 2);
  CHECK(m["inputs"][0]["sha256"] == sha256_file(d / "task.ckpt"));
  CHECK(m["inputs"][1]["sha256"] == sha256_file(d / "base.ckpt"));
  CHECK(m["outputs"][0]["sha256"] == sha256_file(d / "v"));
  CHECK(m["outputs"][0]["sha256"].get<std::string>().size() == 64);
}

TEST_CASE("toy workflow through the command line") {
  TempDir d;
  write_file_atomic(d / "spec.json", R"({"preset": "gender", "total": 400})");
  REQUIRE(run({"gen-data", "--spec", d / "spec.json", "-o", d / "data"}).code == 0);
  for (const char* f : {"train.jsonl", "test.jsonl", "spec.json", "manifest.json"}) CHECK(fs::exists(fs::path(d / "data") / f));
  const std::vector<std::string> common{"--data", d / "data", "--seed", "13", "--epochs", "10", "--dim", "256", "--hidden", "4"};
  auto train = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"train-toy"};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };
  REQUIRE(train({"--save-init", d / "base.ckpt", "-o", d / "fft.ckpt"}).code == 0);
  REQUIRE(train({"--group", "Women", "-o", d / "women.ckpt"}).code == 0);
  REQUIRE(train({"--lora", "--rank", "2", "--adapter-out", d / "ad.ckpt", "-o", d / "lora.ckpt"}).code == 0);
  CHECK(read_checkpoint(d / "ad.ckpt").contains("lora_A"));
  CHECK(read_checkpoint(d / "women.ckpt").metadata().at("subset") == "gender=Women");
  const auto empty = train({"--group", "Nobody", "-o", d / "x.ckpt"});
  CHECK(empty.code == 1);
  CHECK(empty.err.find("EmptyGroup") != std::string::npos);
  CHECK(empty.err.find("Nobody") != std::string::npos);

  REQUIRE(run({"predict", "--ckpt", d / "fft.ckpt", "--data", fs::path(d / "data") / "test.jsonl", "-o", d / "p.jsonl"}).code == 0);
  const auto ev = run({"eval", "--preds", d / "p.jsonl", "--attribute", "gender"});
  CHECK(ev.code == 0);
  CHECK(json::parse(ev.out)["groups"].size() == 7);

  REQUIRE(run({"diff", d / "women.ckpt", d / "base.ckpt", "-o", d / "women.vec"}).code == 0);
  const std::string test_path = (fs::path(d / "data") / "test.jsonl").string();
  json cfg{{"grid", {0.0, 0.5}},
           {"attribute", "gender"},
           {"criterion", "test:macro_accuracy"},
           {"inputs", {{{"seed", 13}, {"anchor", "base.ckpt"}, {"vectors", {"women.vec"}}, {"eval", {{"test", test_path}}}}}}};
  write_file_atomic(d / "inputs.json", cfg.dump());
  REQUIRE(run({"sweep", "--mode", "merge", "--config", d / "inputs.json", "-o", d / "run"}).code == 0);
  const auto res = json::parse(read_file_text(fs::path(d / "run") / "result.json"));
  REQUIRE(res["rows"].size() == 2);
  // Zero-coefficient row equals the evaluation of the base model itself.
  REQUIRE(run({"predict", "--ckpt", d / "base.ckpt", "--data", test_path, "-o", d / "bp.jsonl"}).code == 0);
  const auto base_eval = json::parse(run({"eval", "--preds", d / "bp.jsonl", "--attribute", "gender"}).out);
  CHECK(res["rows"][0]["reports"]["test"] == base_eval);

  cfg["inputs"][0]["vectors"].push_back("women.vec");
  write_file_atomic(d / "two.json", cfg.dump());
  CHECK(run({"sweep", "--mode", "inject", "--config", d / "two.json", "-o", d / "run2"}).code == 2);
  CHECK_FALSE(fs::exists(d / "run2"));
}

TEST_CASE("directory outputs replace only earlier outputs of the same command") {
  TempDir d;
  write_file_atomic(d / "spec.json", R"({"preset": "race", "total": 200})");
  fs::create_directories(d / "mine");
  write_file_atomic(fs::path(d / "mine") / "notes.txt", "keep");
  CHECK(run({"gen-data", "--spec", d / "spec.json", "-o", d / "mine"}).code == 2);
  CHECK(read_file_text(fs::path(d / "mine") / "notes.txt") == "keep");

  REQUIRE(run({"gen-data", "--spec", d / "spec.json", "-o", d / "data"}).code == 0);
  REQUIRE(run({"gen-data", "--spec", d / "spec.json", "--seed", "99", "-o", d / "data"}).code == 0);
  CHECK(json::parse(read_file_text(fs::path(d / "data") / "spec.json"))["seed"] == 99);
  write_file_atomic(d / "sweep.json", R"({"corpus": "race"})");
  CHECK(run({"sweep", "--mode", "merge", "--config", d / "sweep.json", "-o", d / "data"}).code == 2);
  CHECK(fs::exists(fs::path(d / "data") / "train.jsonl"));
  for (const auto& name : d.listing()) CHECK(name.find(".tmp-") == std::string::npos);
}

TEST_CASE("rerunning a command reproduces its outputs byte for byte") {
  TempDir d;
  write_file_atomic(d / "spec.json", R"({"preset": "gender", "total": 300})");
  write_file_atomic(d / "sweep.json",
                    R"({"corpus": {"preset": "gender", "total": 300}, "training": {"epochs": 8}, "dim": 256,
                        "hidden": 4, "seeds": [13, 14], "lora": {"rank": 2}})");
  const std::vector<std::vector<std::string>> commands{
      {"gen-data", "--spec", d / "spec.json", "-o", d / "data"},
      {"train-toy", "--data", d / "data", "--seed", "5", "--epochs", "5", "--dim", "128", "--hidden", "4", "-o", d / "m.ckpt"},
      {"sweep", "--mode", "merge", "--config", d / "sweep.json", "-o", d / "merge"},
      {"sweep", "--mode", "inject", "--config", d / "sweep.json", "-o", d / "inject"},
  };
  std::map<std::string, std::string> first_manifests;
  std::map<std::string, std::string> first;
  for (int round = 0; round < 2; ++round) {
    for (const auto& c : commands) REQUIRE(run(c).code == 0);
    auto files = snapshot(d.path());
    for (auto it = files.begin(); it != files.end();) {
      if (it->first.find("manifest.json") != std::string::npos) {
        if (round == 0) {
          first_manifests[it->first] = it->second;
        } else {
          CHECK(without_duration(it->second) == without_duration(first_manifests.at(it->first)));
        }
        it = files.erase(it);
      } else {
        ++it;
      }
    }
    if (round == 0) {
      first = files;
    } else {
      CHECK(files.size() == first.size());
      for (const auto& [name, bytes] : files) {
        CAPTURE(name);
        CHECK(bytes == first.at(name));
      }
    }
  }
  CHECK(first.count("merge/acc.svg") == 1);
  CHECK(first.count("inject/worst.json") == 1);
}
