// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Group fairness metrics over binary predictions annotated with protected
// attributes.
//
// A multi-valued attribute is reduced to the binary-attribute formulas in two
// ways. Per subgroup, the group is compared against the pooled records of all
// other groups (one-vs-rest). Overall, the gap is the largest rate minus the
// smallest rate across groups. With exactly two groups both reduce to
//   DPD = |P(f=1 | A=1) - P(f=1 | A=0)|
//   EOD = max(|TPR(A=1) - TPR(A=0)|, |FPR(A=1) - FPR(A=0)|).
//
// A true- or false-positive rate is undefined for a side with no Y=1 (resp.
// Y=0) records. Undefined rates are flagged and left out of the comparison
// rather than imputed.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskvec/error.hpp"

namespace taskvec {

inline constexpr double kDefaultThreshold = 0.5;

struct PredictionRecord {
  std::string id;
  int y_true = 0;
  double score = 0.0;
  // Absent when the log carried only a score; filled by binarize.
  std::optional<int> y_pred;
  std::map<std::string, std::string> groups;
};

// 1 iff score >= threshold. Scores equal to the threshold are positive.
int binarize(double score, double threshold = kDefaultThreshold);

// P(y_pred = 1 | group). Throws EmptyGroup.
double selection_rate(const std::vector<PredictionRecord>& records, const std::string& attribute,
                      const std::string& group, double threshold = kDefaultThreshold);

struct DpdResult {
  std::map<std::string, double> per_group;  // one-vs-rest
  double overall = 0.0;                     // max rate - min rate
};
// Throws InsufficientGroups with fewer than two groups.
DpdResult dpd(const std::vector<PredictionRecord>& records, const std::string& attribute,
              double threshold = kDefaultThreshold);

struct UndefinedRate {
  std::string group;
  std::string rate;  // "TPR" or "FPR"
  std::string side;  // "group" or "rest"
  friend bool operator==(const UndefinedRate&, const UndefinedRate&) = default;
};

struct EodGroup {
  std::optional<double> tpr, fpr;            // of the group itself
  std::optional<double> tpr_gap, fpr_gap;    // |group - rest|
  std::optional<double> value;               // max of the defined gaps
};

struct EodResult {
  std::map<std::string, EodGroup> per_group;
  std::optional<double> m_tp, m_fp;          // max - min over groups with the stratum
  std::optional<double> overall;             // max(m_tp, m_fp) over the defined ones
  std::vector<UndefinedRate> undefined;
};
// Throws InsufficientGroups with fewer than two groups.
EodResult eod(const std::vector<PredictionRecord>& records, const std::string& attribute,
              double threshold = kDefaultThreshold);

struct AccuracyResult {
  std::map<std::string, double> per_group;
  double macro = 0.0;  // unweighted mean over groups
};
AccuracyResult group_accuracy(const std::vector<PredictionRecord>& records, const std::string& attribute,
                              double threshold = kDefaultThreshold);

// max group accuracy - min group accuracy. Throws InsufficientGroups.
double accuracy_parity_gap(const std::vector<PredictionRecord>& records, const std::string& attribute,
                           double threshold = kDefaultThreshold);

struct GroupRow {
  std::string group;
  uint64_t n = 0;
  double accuracy = 0.0;
  double selection_rate = 0.0;
  std::optional<double> dpd_ovr;
  std::optional<double> eod_ovr;
  std::optional<double> tpr, fpr, tpr_gap, fpr_gap;
};

struct OverallRow {
  uint64_t n = 0;
  double macro_accuracy = 0.0;
  std::optional<double> dpd;
  std::optional<double> eod;
  std::optional<double> m_tp, m_fp;
  std::optional<double> accuracy_parity_gap;
};

struct ReportIssue {
  ErrorCode code;
  std::string message;
};

struct GroupReport {
  std::string attribute;
  std::vector<GroupRow> rows;  // sorted by group name
  OverallRow overall;
  std::vector<UndefinedRate> undefined;
  // Metrics that could not be computed (e.g. InsufficientGroups).
  std::vector<ReportIssue> issues;

  const GroupRow* find(const std::string& group) const;
};

// Throws InvalidRecord for an empty record set and MissingAttribute when a
// record lacks the attribute; other metric failures are recorded as issues.
GroupReport evaluate(const std::vector<PredictionRecord>& records, const std::string& attribute,
                     double threshold = kDefaultThreshold);

// --- Prediction logs (JSONL) -------------------------------------------------
// {"id", "y_true", "score", "y_pred" (optional), "groups": {attr: subgroup}}

// Throws InvalidRecord naming the line.
PredictionRecord parse_prediction(const std::string& line, std::size_t line_no = 0);
std::vector<PredictionRecord> parse_predictions(const std::string& text);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);
std::string format_predictions(const std::vector<PredictionRecord>& records);

// --- Report emission ---------------------------------------------------------

std::string report_to_json(const GroupReport& report, int indent = 2);
// One row per subgroup plus a trailing "__overall__" row, which carries M_TP
// and M_FP in the tpr_gap and fpr_gap columns.
std::string report_to_csv(const GroupReport& report);

}  // namespace taskvec
