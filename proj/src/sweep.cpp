// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/sweep.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <set>

#include "json.hpp"
#include "taskvec/error.hpp"
#include "taskvec/io_util.hpp"

namespace taskvec::sweep {

using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kOverall = "__overall__";

[[noreturn]] void bad_config(const std::string& what) { throw Error(ErrorCode::kInvalidConfig, "sweep config: " + what); }

struct Criterion {
  std::string split, metric;
  double sign = 1.0;
};

Criterion parse_criterion(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos || colon == 0) {
    throw Error(ErrorCode::kInvalidConfig, "criterion '" + text + "' must look like <split>:<metric>");
  }
  Criterion c{text.substr(0, colon), text.substr(colon + 1)};
  if (c.metric == "macro_accuracy") {
    c.sign = 1.0;
  } else if (c.metric == "dpd" || c.metric == "eod" || c.metric == "accuracy_parity_gap") {
    c.sign = -1.0;
  } else {
    throw Error(ErrorCode::kInvalidConfig, "criterion metric '" + c.metric + "' is not supported");
  }
  return c;
}

std::optional<double> overall_metric(const OverallRow& o, const std::string& metric) {
  if (metric == "macro_accuracy") return o.macro_accuracy;
  if (metric == "dpd") return o.dpd;
  if (metric == "eod") return o.eod;
  if (metric == "accuracy_parity_gap") return o.accuracy_parity_gap;
  if (metric == "m_tp") return o.m_tp;
  if (metric == "m_fp") return o.m_fp;
  return std::nullopt;
}

std::optional<double> group_metric(const GroupRow& r, const std::string& metric) {
  if (metric == "accuracy") return r.accuracy;
  if (metric == "selection_rate") return r.selection_rate;
  if (metric == "dpd") return r.dpd_ovr;
  if (metric == "eod") return r.eod_ovr;
  if (metric == "tpr") return r.tpr;
  if (metric == "fpr") return r.fpr;
  return std::nullopt;
}

const std::vector<std::string>& overall_metrics() {
  static const std::vector<std::string> m{"macro_accuracy", "dpd", "eod", "accuracy_parity_gap", "m_tp", "m_fp"};
  return m;
}

const std::vector<std::string>& group_metrics() {
  static const std::vector<std::string> m{"accuracy", "selection_rate", "dpd", "eod", "tpr", "fpr"};
  return m;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string checkpoint_label(const Checkpoint& ck) {
  const auto it = ck.metadata().find(kIdKey);
  if (it != ck.metadata().end()) return it->second;
  return "sha256:" + sha256_hex(encode_checkpoint(ck));
}

// Runs `point(i)` for i in [0, n) in parallel; rethrows the lowest-index
// failure so the reported error does not depend on scheduling.
template <class F>
void parallel_points(std::size_t n, F point) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<int64_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < count; ++i) {
    try {
      point(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string point_context(double lambda, uint64_t seed) {
  return "lambda=" + format_double(lambda) + " seed=" + std::to_string(seed) + ": ";
}

template <class Edit>
SweepResult run_sweep(const std::string& mode, const std::vector<Arm>& arms, const SweepConfig& config, Edit edit) {
  config.validate();
  if (arms.size() != config.seeds.size()) bad_config("expected one input set per seed");
  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (arms[a].seed != config.seeds[a]) bad_config("input sets must follow the seed order of the config");
  }
  SweepResult res;
  res.mode = mode;
  res.config = config;
  const std::size_t A = arms.size();
  res.rows.resize(config.grid.size() * A);
  parallel_points(res.rows.size(), [&](std::size_t i) {
    const double lambda = config.grid[i / A];
    const Arm& arm = arms[i % A];
    try {
      const Checkpoint edited = edit(arm, lambda);
      res.rows[i] = {lambda, arm.seed, evaluate_checkpoint(edited, arm.eval, config.attribute)};
    } catch (const Error& e) {
      throw Error(e.code(), point_context(lambda, arm.seed) + e.what());
    }
  });
  res.aggregates = compute_aggregates(res.rows, config.grid);
  for (const auto& arm : arms) {
    const std::string key = "seed:" + std::to_string(arm.seed);
    res.provenance[key + ":anchor"] = checkpoint_label(arm.anchor);
    for (std::size_t v = 0; v < arm.vectors.size(); ++v) {
      const auto& src = arm.vectors[v].source();
      res.provenance[key + ":vector:" + std::to_string(v)] = src.task_id + " - " + src.base_id;
    }
  }
  return res;
}

}  // namespace

std::vector<double> default_merge_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 10; ++k) g.push_back(k / 10.0);
  return g;
}

std::vector<double> default_inject_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 5; ++k) g.push_back(k / 5.0);
  return g;
}

void SweepConfig::validate() const {
  if (grid.empty()) bad_config("grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!std::isfinite(grid[i])) bad_config("grid value " + std::to_string(i) + " is not finite");
    if (i > 0 && !(grid[i] > grid[i - 1])) bad_config("grid must be strictly increasing");
  }
  if (seeds.empty()) bad_config("seeds are empty");
  if (std::set<uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) bad_config("seeds repeat");
  if (attribute.empty()) bad_config("attribute is empty");
  if (plot_split.empty()) bad_config("plot split is empty");
  parse_criterion(criterion);
}

Reports evaluate_checkpoint(const Checkpoint& ckpt, const EvalData& eval, const std::string& attribute) {
  Reports out;
  for (const auto& [split, examples] : eval) {
    if (examples.empty()) continue;
    out[split] = evaluate(toy::predict(ckpt, examples), attribute);
  }
  return out;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

std::vector<Aggregate> compute_aggregates(const std::vector<Row>& rows, const std::vector<double>& grid) {
  std::vector<Aggregate> out;
  for (double lambda : grid) {
    std::vector<const Row*> at;
    for (const auto& r : rows) {
      if (r.lambda == lambda) at.push_back(&r);
    }
    std::sort(at.begin(), at.end(), [](const Row* a, const Row* b) { return a->seed < b->seed; });
    std::set<std::string> splits;
    for (const Row* r : at) {
      for (const auto& [s, _] : r->reports) splits.insert(s);
    }
    for (const auto& split : splits) {
      std::set<std::string> groups;
      for (const Row* r : at) {
        const auto it = r->reports.find(split);
        if (it == r->reports.end()) continue;
        for (const auto& g : it->second.rows) groups.insert(g.group);
      }
      auto collect = [&](const std::string& group, const std::string& metric) {
        std::vector<double> vals;
        for (const Row* r : at) {
          const auto it = r->reports.find(split);
          if (it == r->reports.end()) continue;
          std::optional<double> v;
          if (group == kOverall) {
            v = overall_metric(it->second.overall, metric);
          } else if (const GroupRow* gr = it->second.find(group)) {
            v = group_metric(*gr, metric);
          }
          if (v) vals.push_back(*v);
        }
        if (!vals.empty()) out.push_back({lambda, split, group, metric, summarize(vals)});
      };
      for (const auto& m : overall_metrics()) collect(kOverall, m);
      for (const auto& g : groups) {
        for (const auto& m : group_metrics()) collect(g, m);
      }
    }
  }
  return out;
}

SweepResult lambda_sweep(const std::vector<Arm>& arms, const SweepConfig& config) {
  return run_sweep("merge", arms, config, [](const Arm& arm, double lambda) {
    std::vector<WeightedVector> parts;
    parts.reserve(arm.vectors.size());
    for (const auto& v : arm.vectors) parts.push_back({v, lambda});
    return merge(arm.anchor, parts);
  });
}

SweepResult inject_sweep(const std::vector<Arm>& arms, const SweepConfig& config) {
  for (const auto& arm : arms) {
    if (arm.vectors.size() != 1) bad_config("injection takes exactly one vector per seed");
  }
  return run_sweep("inject", arms, config,
                   [](const Arm& arm, double lambda) { return inject(arm.anchor, arm.vectors[0], lambda); });
}

std::optional<double> criterion_score(const Reports& reports, const std::string& criterion) {
  const Criterion c = parse_criterion(criterion);
  const auto it = reports.find(c.split);
  if (it == reports.end()) return std::nullopt;
  const auto v = overall_metric(it->second.overall, c.metric);
  if (!v) return std::nullopt;
  return c.sign * *v;
}

double argmax_lambda(const std::vector<std::pair<double, double>>& scores) {
  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::optional<std::pair<double, double>> best;
  for (const auto& p : sorted) {
    if (std::isnan(p.second)) continue;
    if (!best || p.second > best->second) best = p;
  }
  if (!best) throw Error(ErrorCode::kInvalidArgument, "no lambda has a defined score");
  return best->first;
}

double select_lambda(const SweepResult& result, const std::string& criterion) {
  parse_criterion(criterion);
  std::vector<const Row*> rows;
  for (const auto& r : result.rows) rows.push_back(&r);
  std::sort(rows.begin(), rows.end(),
            [](const Row* a, const Row* b) { return a->lambda != b->lambda ? a->lambda < b->lambda : a->seed < b->seed; });
  std::vector<std::pair<double, double>> means;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<double> vals;
    while (j < rows.size() && rows[j]->lambda == rows[i]->lambda) {
      if (const auto v = criterion_score(rows[j]->reports, criterion)) vals.push_back(*v);
      ++j;
    }
    if (!vals.empty()) means.emplace_back(rows[i]->lambda, summarize(vals).mean);
    i = j;
  }
  return argmax_lambda(means);
}

std::optional<double> worst_score(const GroupRow& row) {
  if (row.dpd_ovr && row.eod_ovr) return (*row.dpd_ovr + *row.eod_ovr) / 2.0;
  if (row.dpd_ovr) return row.dpd_ovr;
  return row.eod_ovr;
}

std::vector<std::string> rank_groups(std::vector<GroupScore> scores, std::size_t k,
                                     const std::vector<std::string>& exclusions) {
  std::set<std::string> excluded;
  for (const auto& e : exclusions) excluded.insert(lower(e));
  std::erase_if(scores, [&](const GroupScore& g) { return excluded.contains(lower(g.group)); });
  if (scores.size() < k) {
    throw Error(ErrorCode::kInsufficientGroups, "need " + std::to_string(k) + " groups after exclusions, have " +
                                                    std::to_string(scores.size()));
  }
  std::sort(scores.begin(), scores.end(), [](const GroupScore& a, const GroupScore& b) {
    if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
    if (a.score && *a.score != *b.score) return *a.score > *b.score;
    if (a.n != b.n) return a.n > b.n;
    return a.group < b.group;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(scores[i].group);
  return out;
}

std::vector<std::string> worst_subgroups(const GroupReport& fft_report, std::size_t k,
                                         const std::vector<std::string>& exclusions) {
  std::vector<GroupScore> scores;
  for (const auto& r : fft_report.rows) scores.push_back({r.group, worst_score(r), r.n});
  return rank_groups(std::move(scores), k, exclusions);
}

// --- Emission ----------------------------------------------------------------

namespace {

ojson opt(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

ojson reports_json(const Reports& reports) {
  ojson j = ojson::object();
  for (const auto& [split, rep] : reports) j[split] = ojson::parse(report_to_json(rep, -1));
  return j;
}

std::string num(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

constexpr std::size_t kCsvColumns = 18;

std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  return out + "\n";
}

void report_lines(std::string& out, const std::string& kind, const std::string& lambda, uint64_t seed,
                  const Reports& reports) {
  for (const auto& [split, rep] : reports) {
    for (const auto& r : rep.rows) {
      std::vector<std::string> f(kCsvColumns);
      f[0] = kind, f[1] = lambda, f[2] = std::to_string(seed), f[3] = split, f[4] = r.group;
      f[5] = std::to_string(r.n), f[6] = format_double(r.accuracy), f[7] = format_double(r.selection_rate);
      f[8] = num(r.dpd_ovr), f[9] = num(r.eod_ovr), f[10] = num(r.tpr), f[11] = num(r.fpr);
      f[12] = num(r.tpr_gap), f[13] = num(r.fpr_gap);
      out += csv_line(f);
    }
    const auto& o = rep.overall;
    std::vector<std::string> f(kCsvColumns);
    f[0] = kind, f[1] = lambda, f[2] = std::to_string(seed), f[3] = split, f[4] = kOverall;
    f[5] = std::to_string(o.n), f[8] = num(o.dpd), f[9] = num(o.eod);
    f[14] = format_double(o.macro_accuracy), f[15] = num(o.accuracy_parity_gap), f[16] = num(o.m_tp),
    f[17] = num(o.m_fp);
    out += csv_line(f);
  }
}

std::size_t metric_column(const std::string& group, const std::string& metric) {
  if (group == kOverall) {
    if (metric == "macro_accuracy") return 14;
    if (metric == "accuracy_parity_gap") return 15;
    if (metric == "m_tp") return 16;
    if (metric == "m_fp") return 17;
  }
  if (metric == "accuracy") return 6;
  if (metric == "selection_rate") return 7;
  if (metric == "dpd") return 8;
  if (metric == "eod") return 9;
  if (metric == "tpr") return 10;
  return 11;  // fpr
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string result_to_json(const SweepResult& r) {
  ojson j;
  j["mode"] = r.mode;
  j["config"] = {{"grid", r.config.grid},
                 {"seeds", r.config.seeds},
                 {"attribute", r.config.attribute},
                 {"criterion", r.config.criterion},
                 {"plot_split", r.config.plot_split}};
  j["selected_lambda"] = opt(r.selected_lambda);
  j["provenance"] = r.provenance;
  j["rows"] = ojson::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"lambda", row.lambda}, {"seed", row.seed}, {"reports", reports_json(row.reports)}});
  }
  j["baselines"] = ojson::array();
  for (const auto& b : r.baselines) {
    j["baselines"].push_back({{"name", b.name}, {"seed", b.seed}, {"reports", reports_json(b.reports)}});
  }
  j["aggregates"] = ojson::array();
  for (const auto& a : r.aggregates) {
    j["aggregates"].push_back({{"lambda", a.lambda},
                               {"split", a.split},
                               {"group", a.group},
                               {"metric", a.metric},
                               {"mean", a.stat.mean},
                               {"stderr", a.stat.stderr_},
                               {"n", a.stat.n}});
  }
  return j.dump(2) + "\n";
}

std::string result_to_csv(const SweepResult& r) {
  std::string out =
      "kind,lambda,seed,split,group,n,accuracy,selection_rate,dpd,eod,tpr,fpr,tpr_gap,fpr_gap,macro_accuracy,"
      "accuracy_parity_gap,m_tp,m_fp\n";
  for (const auto& row : r.rows) report_lines(out, "row", format_double(row.lambda), row.seed, row.reports);
  for (const auto& b : r.baselines) report_lines(out, "baseline:" + b.name, "", b.seed, b.reports);
  // One mean and one stderr line per (lambda, split, group).
  for (std::size_t i = 0; i < r.aggregates.size();) {
    const auto& first = r.aggregates[i];
    std::vector<std::string> mean(kCsvColumns), se(kCsvColumns);
    mean[0] = "mean", se[0] = "stderr";
    mean[1] = se[1] = format_double(first.lambda);
    mean[3] = se[3] = first.split;
    mean[4] = se[4] = first.group;
    std::size_t j = i;
    for (; j < r.aggregates.size(); ++j) {
      const auto& a = r.aggregates[j];
      if (a.lambda != first.lambda || a.split != first.split || a.group != first.group) break;
      const std::size_t col = metric_column(a.group, a.metric);
      mean[col] = format_double(a.stat.mean);
      se[col] = format_double(a.stat.stderr_);
    }
    out += csv_line(mean);
    out += csv_line(se);
    i = j;
  }
  return out;
}

std::string render_svg(const SweepResult& r, const std::string& metric, const std::string& split) {
  constexpr double W = 640, H = 400, L = 64, R = 96, T = 40, B = 52;
  const double pw = W - L - R, ph = H - T - B;
  const auto& grid = r.config.grid;
  double x0 = grid.empty() ? 0.0 : grid.front(), x1 = grid.empty() ? 1.0 : grid.back();
  if (x1 <= x0) {
    x0 -= 0.5;
    x1 += 0.5;
  }

  struct Point {
    double x, y;
    std::size_t series;
  };
  std::vector<Point> points;
  std::vector<std::pair<double, double>> mean_line;
  std::map<std::string, std::vector<double>> baseline_values;
  std::vector<uint64_t> seeds = r.config.seeds;
  double ymax = metric == "macro_accuracy" ? 1.0 : 0.1;
  for (const auto& row : r.rows) {
    const auto it = row.reports.find(split);
    if (it == row.reports.end()) continue;
    const auto v = overall_metric(it->second.overall, metric);
    if (!v) continue;
    const auto s = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), row.seed) - seeds.begin());
    points.push_back({row.lambda, *v, s});
    ymax = std::max(ymax, *v);
  }
  for (const auto& a : r.aggregates) {
    if (a.split == split && a.group == kOverall && a.metric == metric) mean_line.emplace_back(a.lambda, a.stat.mean);
  }
  for (const auto& b : r.baselines) {
    const auto it = b.reports.find(split);
    if (it == b.reports.end()) continue;
    if (const auto v = overall_metric(it->second.overall, metric)) {
      baseline_values[b.name].push_back(*v);
      ymax = std::max(ymax, *v);
    }
  }
  ymax = std::min(1.0, std::ceil(ymax * 10.0 - 1e-9) / 10.0);
  if (ymax <= 0.0) ymax = 0.1;

  auto px = [&](double x) { return fmt2(L + (x - x0) / (x1 - x0) * pw); };
  auto py = [&](double y) { return fmt2(T + ph - y / ymax * ph); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\" "
       "font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt2(L + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       xml_escape(metric + " vs lambda (" + split + ", " + r.mode + ")") + "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = ymax * i / 5.0;
    s += "<line x1=\"" + fmt2(L) + "\" x2=\"" + fmt2(L + pw) + "\" y1=\"" + py(y) + "\" y2=\"" + py(y) +
         "\" stroke=\"#dddddd\"/>\n";
    s += "<text x=\"" + fmt2(L - 6) + "\" y=\"" + py(y) + "\" text-anchor=\"end\" dy=\"4\">" + fmt2(y) + "</text>\n";
  }
  for (double x : grid) {
    s += "<line x1=\"" + px(x) + "\" x2=\"" + px(x) + "\" y1=\"" + fmt2(T + ph) + "\" y2=\"" + fmt2(T + ph + 4) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + px(x) + "\" y=\"" + fmt2(T + ph + 16) + "\" text-anchor=\"middle\">" + fmt2(x) + "</text>\n";
  }
  s += "<rect x=\"" + fmt2(L) + "\" y=\"" + fmt2(T) + "\" width=\"" + fmt2(pw) + "\" height=\"" + fmt2(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + fmt2(L + pw / 2) + "\" y=\"" + fmt2(H - 12) + "\" text-anchor=\"middle\">lambda</text>\n";

  for (const auto& [name, vals] : baseline_values) {
    const double m = summarize(vals).mean;
    s += "<line x1=\"" + fmt2(L) + "\" x2=\"" + fmt2(L + pw) + "\" y1=\"" + py(m) + "\" y2=\"" + py(m) +
         "\" stroke=\"#555555\" stroke-dasharray=\"6 4\"/>\n";
    s += "<text x=\"" + fmt2(L + pw + 4) + "\" y=\"" + py(m) + "\" dy=\"4\">" + xml_escape(name) + "</text>\n";
  }
  if (!mean_line.empty()) {
    s += "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < mean_line.size(); ++i) {
      if (i) s += ' ';
      s += px(mean_line[i].first) + "," + py(mean_line[i].second);
    }
    s += "\"/>\n";
  }
  for (const auto& p : points) {
    s += "<circle cx=\"" + px(p.x) + "\" cy=\"" + py(p.y) + "\" r=\"3\" fill=\"" + palette[p.series % 6] + "\"/>\n";
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const double y = T + 8 + 16.0 * static_cast<double>(i);
    s += "<circle cx=\"" + fmt2(L + pw + 10) + "\" cy=\"" + fmt2(y) + "\" r=\"3\" fill=\"" + palette[i % 6] +
         "\"/>\n";
    s += "<text x=\"" + fmt2(L + pw + 18) + "\" y=\"" + fmt2(y) + "\" dy=\"4\">seed " +
         std::to_string(seeds[i]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

void emit(const SweepResult& result, const std::filesystem::path& dir, const std::vector<std::string>& formats) {
  for (const auto& f : formats) {
    if (f != "json" && f != "csv" && f != "svg") throw Error(ErrorCode::kInvalidArgument, "unknown format '" + f + "'");
  }
  if (formats.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create '" + dir.string() + "': " + ec.message());
  for (const auto& f : formats) {
    if (f == "json") write_file_atomic(dir / "result.json", result_to_json(result));
    if (f == "csv") write_file_atomic(dir / "result.csv", result_to_csv(result));
    if (f == "svg") {
      const std::string& split = result.config.plot_split;
      write_file_atomic(dir / "acc.svg", render_svg(result, "macro_accuracy", split));
      write_file_atomic(dir / "dpd.svg", render_svg(result, "dpd", split));
      write_file_atomic(dir / "eod.svg", render_svg(result, "eod", split));
    }
  }
}

// --- Full protocol -------------------------------------------------------------

SeedModels train_seed(const PipelineConfig& config, const std::vector<toy::Example>& examples, uint64_t seed) {
  SeedModels m;
  m.seed = seed;
  m.corpus = toy::split_corpus(examples, config.corpus.attribute, seed);
  const std::string s = std::to_string(seed);
  m.base = toy::init_model(seed, config.dim, config.hidden)
               .to_checkpoint({{kIdKey, "base:s" + s}, {toy::kMetaKind, "base"}, {toy::kMetaSeed, s}});
  toy::TrainHyper hyper = config.hyper;
  hyper.seed = seed;
  m.fft = toy::train(m.corpus.train, m.base, hyper);
  if (config.lora) m.lora = toy::train_lora(m.corpus.train, m.base, config.lora_options, hyper).merged;
  for (const auto& g : config.corpus.groups) {
    m.subgroup[g.name] = toy::train_subgroup(m.corpus.train, config.corpus.attribute, g.name, m.base, hyper);
  }
  return m;
}

std::vector<SeedModels> train_all(const PipelineConfig& config) {
  SweepConfig check = config.sweep;
  if (check.grid.empty()) check.grid = {0.0};  // the grid is filled in per mode
  check.validate();
  const auto examples = toy::generate_examples(config.corpus);
  std::vector<SeedModels> out(config.sweep.seeds.size());
  parallel_points(out.size(), [&](std::size_t i) {
    try {
      out[i] = train_seed(config, examples, config.sweep.seeds[i]);
    } catch (const Error& e) {
      throw Error(e.code(), "seed=" + std::to_string(config.sweep.seeds[i]) + ": " + e.what());
    }
  });
  return out;
}

namespace {

EvalData eval_data(const SeedModels& m) { return {{"train", m.corpus.train}, {"test", m.corpus.test}}; }

SweepConfig with_grid(SweepConfig c, const std::vector<double>& fallback) {
  if (c.grid.empty()) c.grid = fallback;
  return c;
}

}  // namespace

SweepResult run_merge(const PipelineConfig& config, const std::vector<SeedModels>& models) {
  const SweepConfig cfg = with_grid(config.sweep, default_merge_grid());
  std::vector<Arm> arms;
  for (const auto& m : models) {
    Arm a{m.seed, m.base, {}, eval_data(m)};
    for (const auto& [_, ck] : m.subgroup) a.vectors.push_back(diff(ck, m.base));
    arms.push_back(std::move(a));
  }
  SweepResult res = lambda_sweep(arms, cfg);
  for (const auto& m : models) {
    const EvalData ev = eval_data(m);
    res.baselines.push_back({"fft", m.seed, evaluate_checkpoint(m.fft, ev, cfg.attribute)});
    if (m.lora) res.baselines.push_back({"lora", m.seed, evaluate_checkpoint(*m.lora, ev, cfg.attribute)});
  }
  res.selected_lambda = select_lambda(res, cfg.criterion);
  res.provenance["corpus_spec_sha256"] = sha256_hex(toy::spec_to_json(config.corpus));
  return res;
}

InjectRun run_inject(const PipelineConfig& config, const std::vector<SeedModels>& models) {
  const SweepConfig cfg = with_grid(config.sweep, default_inject_grid());
  InjectRun run;
  std::map<std::string, std::vector<double>> per_group;
  std::map<std::string, uint64_t> sizes;
  for (const auto& m : models) {
    const auto reps = evaluate_checkpoint(m.fft, eval_data(m), cfg.attribute);
    const auto it = reps.find(config.worst_split);
    if (it == reps.end()) bad_config("worst-group split '" + config.worst_split + "' has no data");
    for (const auto& row : it->second.rows) {
      sizes.try_emplace(row.group, row.n);
      per_group[row.group];
      if (const auto s = worst_score(row)) per_group[row.group].push_back(*s);
    }
  }
  for (const auto& [g, vals] : per_group) {
    std::optional<double> mean;
    if (!vals.empty()) mean = summarize(vals).mean;
    run.scores.push_back({g, mean, sizes[g]});
  }
  run.worst = rank_groups(run.scores, config.worst_k, config.exclusions);
  for (const auto& g : run.worst) {
    std::vector<Arm> arms;
    for (const auto& m : models) arms.push_back({m.seed, m.fft, {diff(m.subgroup.at(g), m.base)}, eval_data(m)});
    SweepResult res = inject_sweep(arms, cfg);
    for (const auto& m : models) res.baselines.push_back({"fft", m.seed, evaluate_checkpoint(m.fft, eval_data(m), cfg.attribute)});
    res.selected_lambda = select_lambda(res, cfg.criterion);
    res.provenance["target_group"] = g;
    res.provenance["corpus_spec_sha256"] = sha256_hex(toy::spec_to_json(config.corpus));
    run.per_group[g] = std::move(res);
  }
  return run;
}

}  // namespace taskvec::sweep
