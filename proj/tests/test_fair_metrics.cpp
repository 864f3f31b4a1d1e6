// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <random>

#include "doctest.h"
#include "fair_oracle.hpp"
#include "taskvec/fair_metrics.hpp"

using namespace taskvec;

namespace {

PredictionRecord rec(const std::string& id, int y, int p, const std::string& g) {
  PredictionRecord r;
  r.id = id;
  r.y_true = y;
  r.y_pred = p;
  r.score = p ? 0.9 : 0.1;
  r.groups["a"] = g;
  return r;
}

std::vector<PredictionRecord> from_preds(const std::vector<std::pair<std::string, std::vector<int>>>& spec) {
  std::vector<PredictionRecord> out;
  int id = 0;
  for (const auto& [g, preds] : spec) {
    for (int p : preds) out.push_back(rec("x" + std::to_string(id++), 0, p, g));
  }
  return out;
}

}  // namespace

TEST_CASE("binarize is inclusive at the threshold") {
  CHECK(binarize(0.7, 0.5) == 1);
  CHECK(binarize(0.5, 0.5) == 1);
  CHECK(binarize(0.49999, 0.5) == 0);
}

TEST_CASE("selection rate counts positive predictions") {
  const auto rs = from_preds({{"A", {1, 1, 1, 0}}, {"B", {0, 0}}});
  CHECK(selection_rate(rs, "a", "A") == 0.75);
  CHECK(selection_rate(rs, "a", "B") == 0.0);
  CHECK_THROWS_AS(selection_rate(rs, "a", "C"), Error);
}

TEST_CASE("DPD with two groups at 0.75 and 0.25") {
  const auto rs = from_preds({{"A", {1, 1, 1, 0}}, {"B", {1, 0, 0, 0}}});
  const auto d = dpd(rs, "a");
  CHECK(d.per_group.at("A") == 0.5);
  CHECK(d.per_group.at("B") == 0.5);
  CHECK(d.overall == 0.5);
}

TEST_CASE("DPD parity and three-group spread") {
  const auto parity = dpd(from_preds({{"A", {1, 0}}, {"B", {0, 1}}, {"C", {1, 0}}}), "a");
  CHECK(parity.overall == 0.0);
  for (const auto& [_, v] : parity.per_group) CHECK(v == 0.0);

  std::vector<int> g2(10, 0), g5(10, 0), g9(10, 0);
  std::fill_n(g2.begin(), 2, 1);
  std::fill_n(g5.begin(), 5, 1);
  std::fill_n(g9.begin(), 9, 1);
  const auto rs = from_preds({{"r20", g2}, {"r50", g5}, {"r90", g9}});
  const auto d = dpd(rs, "a");
  CHECK(d.overall == doctest::Approx(0.7));
  // 0.5 vs the pooled complement (2 + 9) / 20.
  CHECK(d.per_group.at("r50") == doctest::Approx(0.05));
  const auto o = oracle::compute(rs, "a");
  CHECK(d.overall == o.overall_dpd);
  CHECK(d.per_group.at("r50") == o.dpd_ovr.at("r50"));
  CHECK_THROWS_AS(dpd(from_preds({{"A", {1}}}), "a"), Error);
}

TEST_CASE("EOD with TPR 1.0 vs 0.5 and equal FPR") {
  const std::vector<PredictionRecord> rs{rec("1", 1, 1, "A"), rec("2", 1, 1, "A"), rec("3", 0, 0, "A"),
                                         rec("4", 0, 0, "A"), rec("5", 1, 1, "B"), rec("6", 1, 0, "B"),
                                         rec("7", 0, 0, "B"), rec("8", 0, 0, "B")};
  const auto e = eod(rs, "a");
  CHECK(*e.overall == 0.5);
  CHECK(*e.m_tp == 0.5);
  CHECK(*e.m_fp == 0.0);
  CHECK(*e.per_group.at("A").value == 0.5);
  CHECK(e.undefined.empty());
}

TEST_CASE("EOD zero for identical confusion behaviour") {
  std::vector<PredictionRecord> rs;
  for (const char* g : {"A", "B", "C"}) {
    rs.push_back(rec(std::string(g) + "1", 1, 1, g));
    rs.push_back(rec(std::string(g) + "2", 1, 0, g));
    rs.push_back(rec(std::string(g) + "3", 0, 1, g));
    rs.push_back(rec(std::string(g) + "4", 0, 0, g));
  }
  CHECK(*eod(rs, "a").overall == 0.0);
}

TEST_CASE("EOD flags a group with no positives and still compares FPR") {
  const std::vector<PredictionRecord> rs{rec("1", 0, 1, "A"), rec("2", 0, 0, "A"), rec("3", 1, 1, "B"),
                                         rec("4", 0, 0, "B"), rec("5", 1, 0, "C"), rec("6", 0, 0, "C")};
  const auto e = eod(rs, "a");
  CHECK(std::find(e.undefined.begin(), e.undefined.end(), UndefinedRate{"A", "TPR", "group"}) != e.undefined.end());
  const auto& a = e.per_group.at("A");
  CHECK_FALSE(a.tpr_gap.has_value());
  CHECK(*a.fpr_gap == 0.5);
  CHECK(*a.value == 0.5);
  // A is excluded from the TPR spread: B has TPR 1, C has TPR 0.
  CHECK(*e.m_tp == 1.0);
}

TEST_CASE("group accuracy and accuracy parity") {
  const std::vector<PredictionRecord> rs{rec("1", 1, 1, "A"), rec("2", 0, 0, "A"), rec("3", 0, 1, "B"),
                                         rec("4", 0, 0, "B")};
  const auto acc = group_accuracy(rs, "a");
  CHECK(acc.per_group.at("A") == 1.0);
  CHECK(acc.per_group.at("B") == 0.5);
  CHECK(acc.macro == 0.75);
  CHECK(accuracy_parity_gap(rs, "a") == 0.5);
  CHECK(accuracy_parity_gap(from_preds({{"A", {0}}, {"B", {0}}}), "a") == 0.0);
}

TEST_CASE("accuracy parity gap of 0.9, 0.8, 0.95") {
  std::vector<PredictionRecord> rs;
  auto add = [&](const std::string& g, int correct, int total) {
    for (int i = 0; i < total; ++i) rs.push_back(rec(g + std::to_string(i), 1, i < correct ? 1 : 0, g));
  };
  add("A", 18, 20);
  add("B", 16, 20);
  add("C", 19, 20);
  CHECK(accuracy_parity_gap(rs, "a") == doctest::Approx(0.15));
}

TEST_CASE("evaluate on a single group reports accuracy and an issue") {
  const auto rep = evaluate(from_preds({{"A", {1, 0}}}), "a");
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].accuracy == 0.5);
  CHECK_FALSE(rep.overall.dpd.has_value());
  REQUIRE_FALSE(rep.issues.empty());
  CHECK(rep.issues[0].code == ErrorCode::kInsufficientGroups);
}

TEST_CASE("perfect classifier: DPD equals the label base-rate disparity, EOD is zero") {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 10; ++i) rs.push_back(rec("a" + std::to_string(i), i < 7, i < 7, "A"));
  for (int i = 0; i < 10; ++i) rs.push_back(rec("b" + std::to_string(i), i < 2, i < 2, "B"));
  const auto rep = evaluate(rs, "a");
  CHECK(*rep.overall.dpd == doctest::Approx(0.5));
  CHECK(*rep.overall.eod == 0.0);
  CHECK(rep.overall.macro_accuracy == 1.0);
}

TEST_CASE("missing attribute and empty input are errors") {
  auto rs = from_preds({{"A", {1}}, {"B", {0}}});
  rs[0].groups.clear();
  CHECK_THROWS_AS(evaluate(rs, "a"), Error);
  CHECK_THROWS_AS(evaluate({}, "a"), Error);
}

TEST_CASE("500 random records over 4 groups match the oracle exactly") {
  std::mt19937_64 rng(500);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rs = oracle::random_records(rng, 500, 4);
    CHECK(oracle::compare(evaluate(rs, "a"), oracle::compute(rs, "a")) == "");
  }
}

TEST_CASE("permutation and relabeling invariance") {
  std::mt19937_64 rng(77);
  auto rs = oracle::random_records(rng, 200, 5);
  const auto base = evaluate(rs, "a");
  std::shuffle(rs.begin(), rs.end(), rng);
  const auto shuffled = evaluate(rs, "a");
  CHECK(report_to_json(base) == report_to_json(shuffled));

  for (auto& r : rs) r.groups["a"] = "renamed_" + std::string(1, static_cast<char>('z' - (r.groups["a"][1] - '0')));
  const auto relabeled = evaluate(rs, "a");
  CHECK(*relabeled.overall.dpd == *base.overall.dpd);
  CHECK(*relabeled.overall.eod == *base.overall.eod);
  CHECK(*relabeled.overall.accuracy_parity_gap == *base.overall.accuracy_parity_gap);
}

TEST_CASE("two-group consistency with the binary formulas") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rs = oracle::random_records(rng, 40, 2);
    const auto rep = evaluate(rs, "a");
    if (rep.rows.size() != 2) continue;
    const double p1 = rep.rows[0].selection_rate, p0 = rep.rows[1].selection_rate;
    CHECK(*rep.rows[0].dpd_ovr == std::fabs(p1 - p0));
    CHECK(*rep.rows[1].dpd_ovr == std::fabs(p1 - p0));
    if (rep.rows[0].tpr && rep.rows[1].tpr && rep.rows[0].fpr && rep.rows[1].fpr) {
      const double m_tp = std::fabs(*rep.rows[0].tpr - *rep.rows[1].tpr);
      const double m_fp = std::fabs(*rep.rows[0].fpr - *rep.rows[1].fpr);
      CHECK(*rep.overall.eod == std::max(m_tp, m_fp));
    }
  }
}

TEST_CASE("JSONL ingestion derives missing predictions from the threshold") {
  const std::string text =
      R"({"id":"a","y_true":1,"score":0.5,"groups":{"gender":"Women"}})" "\n"
      R"({"id":7,"y_true":false,"score":0.2,"y_pred":1,"groups":{"gender":"Men"}})" "\n\n";
  const auto rs = parse_predictions(text);
  REQUIRE(rs.size() == 2);
  CHECK(rs[1].id == "7");
  CHECK_FALSE(rs[0].y_pred.has_value());
  const auto rep = evaluate(rs, "gender");
  CHECK(rep.find("Women")->selection_rate == 1.0);
  CHECK(rep.find("Men")->selection_rate == 1.0);
  CHECK(parse_predictions(format_predictions(rs)).size() == 2);

  CHECK_THROWS_AS(parse_predictions(R"({"id":"a","y_true":2,"score":0.5,"groups":{}})"), Error);
  CHECK_THROWS_AS(parse_predictions(R"({"id":"a","y_true":1,"score":1.5,"groups":{}})"), Error);
  CHECK_THROWS_AS(parse_predictions(R"({"id":"a","y_true":1,"score":0.5,"groups":{}})" "\n"
                                    R"({"id":"a","y_true":1,"score":0.5,"groups":{}})"),
                  Error);
}

TEST_CASE("CSV report has one row per group plus __overall__") {
  const auto rs = from_preds({{"A", {1, 1, 1, 0}}, {"B", {1, 0, 0, 0}}});
  const std::string csv = report_to_csv(evaluate(rs, "a"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("a,__overall__,8,") != std::string::npos);
}
