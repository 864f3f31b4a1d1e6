// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/fair_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "taskvec/io_util.hpp"
#include "taskvec/kernels.hpp"

namespace taskvec {

using nlohmann::json;
using kernels::GroupCounts;

namespace {

struct GroupTable {
  std::vector<std::string> names;  // sorted
  std::vector<GroupCounts> counts;
  GroupCounts total;
};

GroupTable tabulate(const std::vector<PredictionRecord>& records, const std::string& attribute, double threshold) {
  std::map<std::string, uint32_t> index;
  for (const auto& r : records) {
    auto it = r.groups.find(attribute);
    if (it == r.groups.end()) {
      throw Error(ErrorCode::kMissingAttribute, "record '" + r.id + "' has no attribute '" + attribute + "'");
    }
    index.emplace(it->second, 0);
  }
  GroupTable table;
  for (auto& [name, idx] : index) {
    idx = static_cast<uint32_t>(table.names.size());
    table.names.push_back(name);
  }
  std::vector<uint32_t> group(records.size());
  std::vector<uint8_t> y_true(records.size()), y_pred(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    group[i] = index.at(records[i].groups.at(attribute));
    y_true[i] = records[i].y_true != 0;
    y_pred[i] = records[i].y_pred.value_or(binarize(records[i].score, threshold)) != 0;
  }
  table.counts = kernels::count_groups(group, y_true, y_pred, table.names.size());
  for (const auto& c : table.counts) table.total += c;
  return table;
}

double ratio(uint64_t num, uint64_t den) { return static_cast<double>(num) / static_cast<double>(den); }
double rate_positive(const GroupCounts& c) { return ratio(c.predicted_positive, c.n); }
double accuracy_of(const GroupCounts& c) { return ratio(c.correct, c.n); }
std::optional<double> tpr_of(const GroupCounts& c) {
  return c.label_positive ? std::optional(ratio(c.true_positive, c.label_positive)) : std::nullopt;
}
std::optional<double> fpr_of(const GroupCounts& c) {
  return c.label_negative ? std::optional(ratio(c.false_positive, c.label_negative)) : std::nullopt;
}

void require_groups(const GroupTable& t, const char* metric) {
  if (t.names.size() < 2) {
    throw Error(ErrorCode::kInsufficientGroups, std::string(metric) + " needs at least two subgroups, found " +
                                                    std::to_string(t.names.size()));
  }
}

std::optional<double> gap(std::optional<double> a, std::optional<double> b) {
  if (!a || !b) return std::nullopt;
  return std::fabs(*a - *b);
}

std::optional<double> max_opt(std::optional<double> a, std::optional<double> b) {
  if (!a) return b;
  if (!b) return a;
  return std::max(*a, *b);
}

// max - min over the defined values; needs at least two.
std::optional<double> spread(const std::vector<std::optional<double>>& values) {
  double lo = 0, hi = 0;
  int n = 0;
  for (const auto& v : values) {
    if (!v) continue;
    lo = n ? std::min(lo, *v) : *v;
    hi = n ? std::max(hi, *v) : *v;
    ++n;
  }
  if (n < 2) return std::nullopt;
  return hi - lo;
}

DpdResult dpd_of(const GroupTable& t) {
  require_groups(t, "DPD");
  DpdResult out;
  std::vector<std::optional<double>> rates;
  for (std::size_t g = 0; g < t.names.size(); ++g) {
    const GroupCounts rest = t.total - t.counts[g];
    out.per_group[t.names[g]] = std::fabs(rate_positive(t.counts[g]) - rate_positive(rest));
    rates.push_back(rate_positive(t.counts[g]));
  }
  out.overall = *spread(rates);
  return out;
}

EodResult eod_of(const GroupTable& t) {
  require_groups(t, "EOD");
  EodResult out;
  std::vector<std::optional<double>> tprs, fprs;
  for (std::size_t g = 0; g < t.names.size(); ++g) {
    const std::string& name = t.names[g];
    const GroupCounts& c = t.counts[g];
    const GroupCounts rest = t.total - c;
    EodGroup e;
    e.tpr = tpr_of(c);
    e.fpr = fpr_of(c);
    const auto rest_tpr = tpr_of(rest);
    const auto rest_fpr = fpr_of(rest);
    if (!e.tpr) out.undefined.push_back({name, "TPR", "group"});
    if (!rest_tpr) out.undefined.push_back({name, "TPR", "rest"});
    if (!e.fpr) out.undefined.push_back({name, "FPR", "group"});
    if (!rest_fpr) out.undefined.push_back({name, "FPR", "rest"});
    e.tpr_gap = gap(e.tpr, rest_tpr);
    e.fpr_gap = gap(e.fpr, rest_fpr);
    e.value = max_opt(e.tpr_gap, e.fpr_gap);
    tprs.push_back(e.tpr);
    fprs.push_back(e.fpr);
    out.per_group[name] = e;
  }
  out.m_tp = spread(tprs);
  out.m_fp = spread(fprs);
  out.overall = max_opt(out.m_tp, out.m_fp);
  return out;
}

AccuracyResult accuracy_of(const GroupTable& t) {
  AccuracyResult out;
  double sum = 0.0;
  for (std::size_t g = 0; g < t.names.size(); ++g) {
    const double a = accuracy_of(t.counts[g]);
    out.per_group[t.names[g]] = a;
    sum += a;
  }
  out.macro = t.names.empty() ? 0.0 : sum / static_cast<double>(t.names.size());
  return out;
}

double parity_gap_of(const GroupTable& t) {
  require_groups(t, "accuracy parity");
  std::vector<std::optional<double>> acc;
  for (const auto& c : t.counts) acc.push_back(accuracy_of(c));
  return *spread(acc);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::string opt_csv(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }


[[noreturn]] void bad_record(std::size_t line_no, const std::string& what) {
  throw Error(ErrorCode::kInvalidRecord, "prediction log line " + std::to_string(line_no) + ": " + what);
}

int parse_binary(const json& v, std::size_t line_no, const char* field) {
  if (v.is_boolean()) return v.get<bool>() ? 1 : 0;
  if (v.is_number_integer() && (v.get<int64_t>() == 0 || v.get<int64_t>() == 1)) return static_cast<int>(v.get<int64_t>());
  if (v.is_number_float() && (v.get<double>() == 0.0 || v.get<double>() == 1.0)) return v.get<double>() == 1.0;
  bad_record(line_no, std::string(field) + " must be 0 or 1");
}

}  // namespace

int binarize(double score, double threshold) { return score >= threshold ? 1 : 0; }

double selection_rate(const std::vector<PredictionRecord>& records, const std::string& attribute,
                      const std::string& group, double threshold) {
  const GroupTable t = tabulate(records, attribute, threshold);
  auto it = std::find(t.names.begin(), t.names.end(), group);
  if (it == t.names.end()) throw Error(ErrorCode::kEmptyGroup, "subgroup '" + group + "' has no records");
  return rate_positive(t.counts[static_cast<std::size_t>(it - t.names.begin())]);
}

DpdResult dpd(const std::vector<PredictionRecord>& records, const std::string& attribute, double threshold) {
  return dpd_of(tabulate(records, attribute, threshold));
}

EodResult eod(const std::vector<PredictionRecord>& records, const std::string& attribute, double threshold) {
  return eod_of(tabulate(records, attribute, threshold));
}

AccuracyResult group_accuracy(const std::vector<PredictionRecord>& records, const std::string& attribute,
                              double threshold) {
  const GroupTable t = tabulate(records, attribute, threshold);
  if (t.names.empty()) throw Error(ErrorCode::kEmptyGroup, "no records to evaluate");
  return accuracy_of(t);
}

double accuracy_parity_gap(const std::vector<PredictionRecord>& records, const std::string& attribute,
                           double threshold) {
  return parity_gap_of(tabulate(records, attribute, threshold));
}

const GroupRow* GroupReport::find(const std::string& group) const {
  for (const auto& r : rows) {
    if (r.group == group) return &r;
  }
  return nullptr;
}

GroupReport evaluate(const std::vector<PredictionRecord>& records, const std::string& attribute, double threshold) {
  if (records.empty()) throw Error(ErrorCode::kInvalidRecord, "no prediction records to evaluate");
  const GroupTable t = tabulate(records, attribute, threshold);
  GroupReport report;
  report.attribute = attribute;

  const AccuracyResult acc = accuracy_of(t);
  std::optional<DpdResult> d;
  std::optional<EodResult> e;
  try {
    d = dpd_of(t);
    e = eod_of(t);
    report.overall.accuracy_parity_gap = parity_gap_of(t);
  } catch (const Error& err) {
    report.issues.push_back({err.code(), err.what()});
  }

  for (std::size_t g = 0; g < t.names.size(); ++g) {
    GroupRow row;
    row.group = t.names[g];
    row.n = t.counts[g].n;
    row.accuracy = acc.per_group.at(row.group);
    row.selection_rate = rate_positive(t.counts[g]);
    row.tpr = tpr_of(t.counts[g]);
    row.fpr = fpr_of(t.counts[g]);
    if (d) row.dpd_ovr = d->per_group.at(row.group);
    if (e) {
      const EodGroup& eg = e->per_group.at(row.group);
      row.eod_ovr = eg.value;
      row.tpr_gap = eg.tpr_gap;
      row.fpr_gap = eg.fpr_gap;
    }
    report.rows.push_back(std::move(row));
  }
  report.overall.n = t.total.n;
  report.overall.macro_accuracy = acc.macro;
  if (d) report.overall.dpd = d->overall;
  if (e) {
    report.overall.eod = e->overall;
    report.overall.m_tp = e->m_tp;
    report.overall.m_fp = e->m_fp;
    report.undefined = e->undefined;
  }
  return report;
}

PredictionRecord parse_prediction(const std::string& line, std::size_t line_no) {
  const json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) bad_record(line_no, "not a JSON object");
  PredictionRecord r;
  if (!j.contains("id")) bad_record(line_no, "missing id");
  if (j["id"].is_string()) {
    r.id = j["id"].get<std::string>();
  } else if (j["id"].is_number_integer()) {
    r.id = j["id"].dump();
  } else {
    bad_record(line_no, "id must be a string or integer");
  }
  if (!j.contains("y_true")) bad_record(line_no, "missing y_true");
  r.y_true = parse_binary(j["y_true"], line_no, "y_true");
  if (!j.contains("score") || !j["score"].is_number()) bad_record(line_no, "missing numeric score");
  r.score = j["score"].get<double>();
  if (!std::isfinite(r.score) || r.score < 0.0 || r.score > 1.0) bad_record(line_no, "score must lie in [0, 1]");
  if (j.contains("y_pred") && !j["y_pred"].is_null()) r.y_pred = parse_binary(j["y_pred"], line_no, "y_pred");
  if (!j.contains("groups") || !j["groups"].is_object()) bad_record(line_no, "missing groups object");
  for (const auto& [k, v] : j["groups"].items()) {
    if (!v.is_string()) bad_record(line_no, "group value for '" + k + "' must be a string");
    r.groups.emplace(k, v.get<std::string>());
  }
  return r;
}

std::vector<PredictionRecord> parse_predictions(const std::string& text) {
  std::vector<PredictionRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PredictionRecord r = parse_prediction(line, line_no);
    if (auto [it, fresh] = seen.emplace(r.id, line_no); !fresh) {
      bad_record(line_no, "duplicate id '" + r.id + "' (first on line " + std::to_string(it->second) + ")");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  return parse_predictions(read_file_text(path));
}

std::string format_predictions(const std::vector<PredictionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json j = {{"id", r.id}, {"y_true", r.y_true}, {"score", r.score}, {"groups", r.groups}};
    if (r.y_pred) j["y_pred"] = *r.y_pred;
    out += j.dump() + "\n";
  }
  return out;
}

std::string report_to_json(const GroupReport& report, int indent) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"group", r.group},
                    {"n", r.n},
                    {"accuracy", r.accuracy},
                    {"selection_rate", r.selection_rate},
                    {"dpd_ovr", opt_json(r.dpd_ovr)},
                    {"eod_ovr", opt_json(r.eod_ovr)},
                    {"tpr", opt_json(r.tpr)},
                    {"fpr", opt_json(r.fpr)},
                    {"tpr_gap", opt_json(r.tpr_gap)},
                    {"fpr_gap", opt_json(r.fpr_gap)}});
  }
  json undefined = json::array();
  for (const auto& u : report.undefined) undefined.push_back({{"group", u.group}, {"rate", u.rate}, {"side", u.side}});
  json issues = json::array();
  for (const auto& i : report.issues) {
    issues.push_back({{"code", std::string(error_code_name(i.code))}, {"message", i.message}});
  }
  const auto& o = report.overall;
  json j = {{"attribute", report.attribute},
            {"groups", rows},
            {"overall",
             {{"n", o.n},
              {"macro_accuracy", o.macro_accuracy},
              {"dpd", opt_json(o.dpd)},
              {"eod", opt_json(o.eod)},
              {"m_tp", opt_json(o.m_tp)},
              {"m_fp", opt_json(o.m_fp)},
              {"accuracy_parity_gap", opt_json(o.accuracy_parity_gap)}}},
            {"undefined_rates", undefined},
            {"issues", issues}};
  return j.dump(indent) + "\n";
}

std::string report_to_csv(const GroupReport& report) {
  std::string out =
      "attribute,group,n,accuracy,selection_rate,dpd,eod,tpr,fpr,tpr_gap,fpr_gap,accuracy_parity_gap\n";
  const std::string attr = csv_escape(report.attribute);
  for (const auto& r : report.rows) {
    out += attr + "," + csv_escape(r.group) + "," + std::to_string(r.n) + "," + format_double(r.accuracy) + "," +
           format_double(r.selection_rate) + "," + opt_csv(r.dpd_ovr) + "," + opt_csv(r.eod_ovr) + "," +
           opt_csv(r.tpr) + "," + opt_csv(r.fpr) + "," + opt_csv(r.tpr_gap) + "," + opt_csv(r.fpr_gap) + ",\n";
  }
  const auto& o = report.overall;
  out += attr + ",__overall__," + std::to_string(o.n) + "," + format_double(o.macro_accuracy) + ",," +
         opt_csv(o.dpd) + "," + opt_csv(o.eod) + ",,," + opt_csv(o.m_tp) + "," + opt_csv(o.m_fp) + "," +
         opt_csv(o.accuracy_parity_gap) + "\n";
  return out;
}

}  // namespace taskvec
