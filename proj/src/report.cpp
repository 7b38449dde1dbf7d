#include "fdmix/report.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace fdmix {

namespace {

using nlohmann::json;

constexpr const char* kColumns =
    "study,method,strategy,num_target,shard,checkpoint,mean_pct,ci95_pct,n_episodes,seed";

// shortest decimal form that reads back to the same double
std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("fmt_double: conversion failed");
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument("report: bad numeric field '" + s + "'");
  }
  return v;
}

std::string fmt_2dp(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

std::string csv(const StudyReport& report) {
  std::ostringstream out;
  out << kColumns << "\n";
  for (const auto& r : report.rows) {
    out << r.study << ',' << r.method << ',' << r.strategy << ',' << r.num_target << ','
        << r.shard << ',' << r.checkpoint << ',' << fmt_double(r.mean_pct) << ','
        << fmt_double(r.ci95_pct) << ',' << r.n_episodes << ',' << r.seed << "\n";
  }
  return out.str();
}

std::string as_json(const StudyReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"study", r.study},
                    {"method", r.method},
                    {"strategy", r.strategy},
                    {"num_target", r.num_target},
                    {"shard", r.shard},
                    {"checkpoint", r.checkpoint},
                    {"mean_pct", r.mean_pct},
                    {"ci95_pct", r.ci95_pct},
                    {"n_episodes", r.n_episodes},
                    {"seed", r.seed}});
  }
  return json{{"rows", rows}}.dump(2) + "\n";
}

std::string markdown(const StudyReport& report) {
  // one table row per study cell, one column per shard/checkpoint pair
  struct CellKey {
    std::string study, method, strategy;
    int num_target;
    std::uint64_t seed;
    bool operator<(const CellKey& o) const {
      return std::tie(study, method, strategy, num_target, seed) <
             std::tie(o.study, o.method, o.strategy, o.num_target, o.seed);
    }
  };
  std::vector<CellKey> row_order;
  std::vector<std::string> col_order;
  std::map<CellKey, std::map<std::string, std::string>> cells;
  for (const auto& r : report.rows) {
    const CellKey key{r.study, r.method, r.strategy, r.num_target, r.seed};
    const std::string col = r.shard + "/" + r.checkpoint;
    if (!cells.count(key)) row_order.push_back(key);
    if (std::find(col_order.begin(), col_order.end(), col) == col_order.end()) {
      col_order.push_back(col);
    }
    cells[key][col] = fmt_2dp(r.mean_pct) + " ± " + fmt_2dp(r.ci95_pct);
  }

  std::ostringstream out;
  out << "| study | method | strategy | num_target | seed |";
  for (const auto& c : col_order) out << ' ' << c << " |";
  out << "\n|---|---|---|---|---|";
  for (std::size_t i = 0; i < col_order.size(); ++i) out << "---|";
  out << "\n";
  for (const auto& key : row_order) {
    out << "| " << key.study << " | " << key.method << " | " << key.strategy << " | "
        << key.num_target << " | " << key.seed << " |";
    for (const auto& c : col_order) {
      auto it = cells[key].find(c);
      out << ' ' << (it == cells[key].end() ? "—" : it->second) << " |";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace

std::string emit_table(const StudyReport& report, TableStyle style) {
  if (report.rows.empty()) throw std::invalid_argument("emit_table: empty report");
  switch (style) {
    case TableStyle::Csv: return csv(report);
    case TableStyle::Json: return as_json(report);
    default: return markdown(report);
  }
}

StudyReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kColumns) {
    throw std::invalid_argument("parse_report_csv: bad or missing header");
  }
  StudyReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != 10) {
      throw std::invalid_argument("parse_report_csv: expected 10 fields, got " +
                                  std::to_string(f.size()));
    }
    StudyRow r;
    r.study = f[0];
    r.method = f[1];
    r.strategy = f[2];
    r.num_target = static_cast<int>(parse_double(f[3]));
    r.shard = f[4];
    r.checkpoint = f[5];
    r.mean_pct = parse_double(f[6]);
    r.ci95_pct = parse_double(f[7]);
    r.n_episodes = static_cast<int>(parse_double(f[8]));
    r.seed = static_cast<std::uint64_t>(std::stoull(f[9]));
    report.rows.push_back(std::move(r));
  }
  if (report.rows.empty()) throw std::invalid_argument("parse_report_csv: no data rows");
  return report;
}

StudyReport parse_report_json(const std::string& text) {
  json doc = json::parse(text);
  if (!doc.contains("rows") || !doc["rows"].is_array() || doc["rows"].empty()) {
    throw std::invalid_argument("parse_report_json: missing or empty rows");
  }
  StudyReport report;
  for (const auto& j : doc["rows"]) {
    StudyRow r;
    r.study = j.at("study").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.num_target = j.at("num_target").get<int>();
    r.shard = j.at("shard").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.mean_pct = j.at("mean_pct").get<double>();
    r.ci95_pct = j.at("ci95_pct").get<double>();
    r.n_episodes = j.at("n_episodes").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    report.rows.push_back(std::move(r));
  }
  return report;
}

}  // namespace fdmix
