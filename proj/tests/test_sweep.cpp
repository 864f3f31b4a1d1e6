// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "csv_reader.hpp"
#include "doctest.h"
#include "json.hpp"
#include "taskvec/error.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/sweep.hpp"

using namespace taskvec;
using namespace taskvec::sweep;

namespace {

GroupReport report_with_macro(double macro) {
  GroupReport r;
  r.attribute = "a";
  r.overall.macro_accuracy = macro;
  return r;
}

SweepResult hand_result(const std::vector<double>& grid, const std::vector<std::vector<double>>& per_seed) {
  SweepResult r;
  r.config.grid = grid;
  r.config.seeds.clear();
  for (std::size_t s = 0; s < per_seed.size(); ++s) r.config.seeds.push_back(13 + s);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (std::size_t s = 0; s < per_seed.size(); ++s) {
      r.rows.push_back({grid[g], 13 + s, {{"train", report_with_macro(per_seed[s][g])}}});
    }
  }
  return r;
}

GroupRow row(const std::string& g, double dpd, double eod, uint64_t n = 10) {
  GroupRow r;
  r.group = g;
  r.n = n;
  r.dpd_ovr = dpd;
  r.eod_ovr = eod;
  return r;
}

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.corpus.attribute = "g";
  c.corpus.groups = {{"A", 0.4, 0.4, 1.0}, {"B", 0.4, 0.5, 0.0}, {"Other", 0.2, 0.4, 0.0}};
  c.corpus.total = 300;
  c.dim = 256;
  c.hidden = 8;
  c.hyper.epochs = 15;
  c.lora_options.rank = 2;
  c.sweep.attribute = "g";
  c.sweep.seeds = {13, 14};
  c.sweep.grid = {0.0, 0.5, 1.0};
  c.worst_k = 1;
  return c;
}

const std::vector<SeedModels>& tiny_models() {
  static const auto models = train_all(tiny_config());
  return models;
}

std::string reports_json(const Reports& r) {
  std::string s;
  for (const auto& [k, v] : r) s += k + report_to_json(v);
  return s;
}

}  // namespace

TEST_CASE("default grids") {
  const auto m = default_merge_grid();
  REQUIRE(m.size() == 11);
  for (int k = 0; k <= 10; ++k) CHECK(m[k] == k / 10.0);
  const auto i = default_inject_grid();
  REQUIRE(i.size() == 6);
  CHECK(i[1] == 0.2);
  CHECK(i.back() == 1.0);
}

TEST_CASE("config validation") {
  SweepConfig c;
  c.grid = {0.0, 0.5};
  CHECK_NOTHROW(c.validate());
  auto bad = [&](auto mutate) {
    SweepConfig d = c;
    mutate(d);
    CHECK_THROWS_AS(d.validate(), Error);
  };
  bad([](SweepConfig& d) { d.grid = {0.5, 0.5}; });
  bad([](SweepConfig& d) { d.grid = {0.5, 0.1}; });
  bad([](SweepConfig& d) { d.grid = {0.0, NAN}; });
  bad([](SweepConfig& d) { d.grid.clear(); });
  bad([](SweepConfig& d) { d.seeds.clear(); });
  bad([](SweepConfig& d) { d.seeds = {1, 1}; });
  bad([](SweepConfig& d) { d.criterion = "macro_accuracy"; });
  bad([](SweepConfig& d) { d.criterion = "train:f1"; });
}

TEST_CASE("select_lambda: argmax of the across-seed mean, ties to the smallest") {
  CHECK(argmax_lambda({{0.0, 0.7}, {0.5, 0.9}, {1.0, 0.8}}) == 0.5);
  CHECK(argmax_lambda({{0.8, 0.6}, {0.0, 0.1}, {0.4, 0.6}}) == 0.4);

  // Seed means 0.7, 0.9, 0.8.
  auto r = hand_result({0.0, 0.5, 1.0}, {{0.6, 0.95, 0.8}, {0.8, 0.85, 0.8}});
  CHECK(select_lambda(r, "train:macro_accuracy") == 0.5);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(r.rows.begin(), r.rows.end(), rng);
    CHECK(select_lambda(r, "train:macro_accuracy") == 0.5);
  }
  const auto tie = hand_result({0.0, 0.4, 0.8}, {{0.5, 0.75, 0.75}});
  CHECK(select_lambda(tie, "train:macro_accuracy") == 0.4);
  CHECK_THROWS_AS(select_lambda(tie, "test:macro_accuracy"), Error);
}

TEST_CASE("select_lambda minimizes fairness criteria") {
  SweepResult r;
  r.config.grid = {0.0, 1.0};
  for (double l : {0.0, 1.0}) {
    GroupReport g;
    g.overall.dpd = l == 0.0 ? 0.3 : 0.1;
    r.rows.push_back({l, 13, {{"test", g}}});
  }
  CHECK(select_lambda(r, "test:dpd") == 1.0);
}

TEST_CASE("worst_subgroups ranking") {
  GroupReport rep;
  rep.rows = {row("A", 0.3, 0.3), row("B", 0.5, 0.5), row("Other", 0.9, 0.9), row("Z", 0.0, 0.0)};
  CHECK(worst_subgroups(rep, 2, {"Other"}) == std::vector<std::string>{"B", "A"});
  CHECK(worst_subgroups(rep, 4, {}).back() == "Z");
  CHECK(worst_subgroups(rep, 1, {"OTHER"}) == std::vector<std::string>{"B"});
  CHECK_THROWS_AS(worst_subgroups(rep, 4, {"other"}), Error);

  GroupReport ties;
  ties.rows = {row("b", 0.25, 0.75, 5), row("a", 0.75, 0.25, 5), row("c", 0.5, 0.5, 9)};
  CHECK(worst_subgroups(ties, 3, {}) == std::vector<std::string>{"c", "a", "b"});

  GroupReport undefined_eod;
  undefined_eod.rows = {row("x", 0.4, 0.0), row("y", 0.3, 0.0)};
  undefined_eod.rows[0].eod_ovr.reset();
  // x averages over its defined term only.
  CHECK(*worst_score(undefined_eod.rows[0]) == 0.4);
  CHECK(worst_subgroups(undefined_eod, 1, {}) == std::vector<std::string>{"x"});
}

TEST_CASE("summarize matches sample sd / sqrt(n)") {
  const std::vector<double> v{0.61, 0.7, 0.66};
  const auto s = summarize(v);
  const double mean = (0.61 + 0.7 + 0.66) / 3;
  const double sd = std::sqrt(((0.61 - mean) * (0.61 - mean) + (0.7 - mean) * (0.7 - mean) +
                               (0.66 - mean) * (0.66 - mean)) / 2);
  CHECK(std::fabs(s.mean - mean) <= 1e-12 * mean);
  CHECK(std::fabs(s.stderr_ - sd / std::sqrt(3.0)) <= 1e-12 * s.stderr_);
  CHECK(summarize({0.4}).stderr_ == 0.0);
  CHECK(summarize({}).n == 0);
}

TEST_CASE("lambda sweep over a trained toy pipeline") {
  const auto cfg = tiny_config();
  const auto& models = tiny_models();
  const auto res = run_merge(cfg, models);
  REQUIRE(res.rows.size() == 3 * 2);
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    CHECK(res.rows[i].lambda == cfg.sweep.grid[i / 2]);
    CHECK(res.rows[i].seed == cfg.sweep.seeds[i % 2]);
  }

  SUBCASE("lambda = 0 rows equal the base evaluation") {
    for (std::size_t s = 0; s < models.size(); ++s) {
      const EvalData ev{{"train", models[s].corpus.train}, {"test", models[s].corpus.test}};
      CHECK(reports_json(res.rows[s].reports) == reports_json(evaluate_checkpoint(models[s].base, ev, "g")));
    }
  }
  SUBCASE("aggregates are recomputable from rows") {
    std::size_t checked = 0;
    for (const auto& a : res.aggregates) {
      std::vector<double> vals;
      for (uint64_t seed : cfg.sweep.seeds) {
        for (const auto& r : res.rows) {
          if (r.lambda != a.lambda || r.seed != seed) continue;
          const auto& rep = r.reports.at(a.split);
          std::optional<double> v;
          if (a.group == "__overall__") {
            if (a.metric == "macro_accuracy") v = rep.overall.macro_accuracy;
            if (a.metric == "dpd") v = rep.overall.dpd;
            if (a.metric == "eod") v = rep.overall.eod;
          } else if (a.metric == "accuracy") {
            v = rep.find(a.group)->accuracy;
          } else if (a.metric == "dpd") {
            v = rep.find(a.group)->dpd_ovr;
          }
          if (v) vals.push_back(*v);
        }
      }
      if (vals.empty()) continue;
      double mean = 0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double ss = 0;
      for (double v : vals) ss += (v - mean) * (v - mean);
      const double se = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1) / static_cast<double>(vals.size())) : 0.0;
      CHECK(std::fabs(a.stat.mean - mean) <= 1e-12 * std::max(1.0, std::fabs(mean)));
      CHECK(std::fabs(a.stat.stderr_ - se) <= 1e-12 * std::max(1.0, se));
      ++checked;
    }
    CHECK(checked > 20);
  }
  SUBCASE("baselines and selection") {
    CHECK(res.baselines.size() == 4);
    CHECK(res.selected_lambda.has_value());
    CHECK(*res.selected_lambda == select_lambda(res, "train:macro_accuracy"));
  }
}

TEST_CASE("grid cardinality with one seed") {
  const auto& m = tiny_models()[0];
  SweepConfig c;
  c.attribute = "g";
  c.seeds = {13};
  c.grid = {0.0, 0.5, 1.0};
  Arm arm{13, m.base, {diff(m.subgroup.at("A"), m.base)}, {{"test", m.corpus.test}}};
  CHECK(lambda_sweep({arm}, c).rows.size() == 3);
  c.seeds = {14};
  CHECK_THROWS_AS(lambda_sweep({arm}, c), Error);
}

TEST_CASE("injection sweep rows match an independent recomputation") {
  const auto cfg = tiny_config();
  const auto& models = tiny_models();
  const auto run = run_inject(cfg, models);
  REQUIRE(run.worst.size() == 1);
  CHECK(run.worst[0] != "Other");
  const auto& res = run.per_group.at(run.worst[0]);
  REQUIRE(res.rows.size() == 3 * 2);
  for (const auto& r : res.rows) {
    const auto& m = models[r.seed == 13 ? 0 : 1];
    const auto edited = inject(m.fft, diff(m.subgroup.at(run.worst[0]), m.base), r.lambda);
    const auto direct = evaluate(toy::predict(edited, m.corpus.test), "g");
    CHECK(report_to_json(r.reports.at("test")) == report_to_json(direct));
    if (r.lambda == 0.0) {
      CHECK(report_to_json(r.reports.at("test")) == report_to_json(evaluate(toy::predict(m.fft, m.corpus.test), "g")));
    }
  }
}

TEST_CASE("default injection grid gives six rows per seed") {
  auto cfg = tiny_config();
  cfg.sweep.grid.clear();
  const auto run = run_inject(cfg, tiny_models());
  CHECK(run.per_group.begin()->second.rows.size() == 6 * 2);
}

TEST_CASE("a failing grid point aborts with context") {
  const auto& m = tiny_models()[0];
  SweepConfig c;
  c.attribute = "g";
  c.seeds = {13};
  c.grid = {0.25, 0.5};
  Checkpoint wrong = m.base;
  wrong.set("b1", Tensor::from_f32({3}, std::vector<float>(3, 0.f)));
  Arm arm{13, m.base, {diff(wrong, wrong)}, {{"test", m.corpus.test}}};
  try {
    lambda_sweep({arm}, c);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShapeMismatch);
    CHECK(std::string(e.what()).find("lambda=0.25 seed=13") != std::string::npos);
  }
}

TEST_CASE("CSV emission parses back to full precision") {
  const auto res = run_merge(tiny_config(), tiny_models());
  const auto table = testing::parse_csv(result_to_csv(res));
  REQUIRE(table.size() > 1);
  const auto& header = table[0];
  CHECK(header.size() == 18);
  auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  std::size_t matched = 0;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& f = table[i];
    REQUIRE(f.size() == 18);
    if (f[col("kind")] != "row") continue;
    const double lambda = std::strtod(f[col("lambda")].c_str(), nullptr);
    const uint64_t seed = std::stoull(f[col("seed")]);
    const auto it = std::find_if(res.rows.begin(), res.rows.end(),
                                 [&](const Row& r) { return r.lambda == lambda && r.seed == seed; });
    REQUIRE(it != res.rows.end());
    const auto& rep = it->reports.at(f[col("split")]);
    auto same = [&](const std::string& c, std::optional<double> v) {
      if (!v) return f[col(c)].empty();
      return std::strtod(f[col(c)].c_str(), nullptr) == *v;
    };
    if (f[col("group")] == "__overall__") {
      CHECK(same("macro_accuracy", rep.overall.macro_accuracy));
      CHECK(same("dpd", rep.overall.dpd));
      CHECK(same("eod", rep.overall.eod));
      CHECK(same("m_tp", rep.overall.m_tp));
      CHECK(same("m_fp", rep.overall.m_fp));
      CHECK(same("accuracy_parity_gap", rep.overall.accuracy_parity_gap));
    } else {
      const GroupRow* g = rep.find(f[col("group")]);
      REQUIRE(g);
      CHECK(std::stoull(f[col("n")]) == g->n);
      CHECK(same("accuracy", g->accuracy));
      CHECK(same("selection_rate", g->selection_rate));
      CHECK(same("dpd", g->dpd_ovr));
      CHECK(same("eod", g->eod_ovr));
      CHECK(same("tpr", g->tpr));
      CHECK(same("fpr", g->fpr));
      CHECK(same("tpr_gap", g->tpr_gap));
      CHECK(same("fpr_gap", g->fpr_gap));
    }
    ++matched;
  }
  CHECK(matched == res.rows.size() * 2 * 4);
  for (const auto& a : res.aggregates) {
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) {
      return f[0] == "mean" && std::strtod(f[1].c_str(), nullptr) == a.lambda && f[3] == a.split && f[4] == a.group;
    });
    REQUIRE(it != table.end());
  }
}

TEST_CASE("JSON emission carries the full structure") {
  const auto res = run_merge(tiny_config(), tiny_models());
  const auto j = nlohmann::json::parse(result_to_json(res));
  CHECK(j["mode"] == "merge");
  CHECK(j["rows"].size() == res.rows.size());
  CHECK(j["aggregates"].size() == res.aggregates.size());
  CHECK(j["selected_lambda"].get<double>() == *res.selected_lambda);
  CHECK(j["rows"][0]["reports"]["test"]["overall"]["macro_accuracy"].get<double>() ==
        res.rows[0].reports.at("test").overall.macro_accuracy);
}

TEST_CASE("emit writes nothing for no formats and deterministic SVGs otherwise") {
  const auto res = run_merge(tiny_config(), tiny_models());
  const auto dir = std::filesystem::temp_directory_path() / ("taskvec_emit_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  emit(res, dir, {});
  CHECK_FALSE(std::filesystem::exists(dir));
  emit(res, dir, {"json", "csv", "svg"});
  for (const char* f : {"result.json", "result.csv", "acc.svg", "dpd.svg", "eod.svg"}) {
    CHECK(std::filesystem::exists(dir / f));
  }
  const auto first = read_file_text(dir / "acc.svg");
  emit(res, dir, {"svg"});
  CHECK(read_file_text(dir / "acc.svg") == first);
  CHECK(render_svg(res, "eod", "test") == render_svg(res, "eod", "test"));
  CHECK(first.starts_with("<svg"));
  CHECK_THROWS_AS(emit(res, dir, {"png"}), Error);
  std::filesystem::remove_all(dir);
}
