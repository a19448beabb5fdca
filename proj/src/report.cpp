#include "citycond/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

namespace citycond {

using nlohmann::json;

namespace {

const std::vector<std::string> kMetricOrder = {"mse", "mae",  "mse_norm", "mae_norm", "val_mse",
                                               "ade", "fde",  "pre",      "post"};

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

double parse_double(const std::string& cell, const std::string& what) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) {
    throw DataError("cannot parse " + what + " '" + cell + "'");
  }
  return out;
}

// Dataset references may contain commas, so string cells get RFC-4180
// quoting when needed and the splitter honors it.
std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out += ch;
  }
  out += "\"";
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"' && cur.empty()) {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

const Stat* find_metric(const AggregateRow& row, const std::string& name) {
  for (const auto& [k, s] : row.metrics)
    if (k == name) return &s;
  return nullptr;
}

// Metric names a run of this shape contributes.
std::vector<std::string> metric_names(const RunResult& r) {
  if (r.regime == "crosscity") return {"pre", "post"};
  if (r.trajectory) return {"ade", "fde"};
  return {"mse", "mae", "mse_norm", "mae_norm", "val_mse"};
}

double metric_value(const RunResult& r, const std::string& name) {
  if (name == "mse") return r.mse;
  if (name == "mae") return r.mae;
  if (name == "mse_norm") return r.mse_norm;
  if (name == "mae_norm") return r.mae_norm;
  if (name == "val_mse") return r.val_mse;
  if (name == "ade") return r.ade;
  if (name == "fde") return r.fde;
  if (name == "pre") return r.pre;
  if (name == "post") return r.post;
  throw DataError("unknown metric '" + name + "'");
}

void sort_canonically(std::vector<AggregateRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const AggregateRow& a, const AggregateRow& b) {
    auto key = [](const AggregateRow& r) {
      return std::tie(r.backbone, r.variant, r.regime, r.fraction, r.direction, r.dataset,
                      r.config_hash);
    };
    return key(a) < key(b);
  });
}

std::string row_cell(const AggregateRow& row, const std::string& metric, bool mean_part) {
  const Stat* s = find_metric(row, metric);
  if (!s) return "--";
  return g17(mean_part ? s->mean : s->std);
}

}  // namespace

Stat mean_std(std::vector<double> values) {
  if (values.empty()) throw DataError("mean_std of an empty sample");
  std::sort(values.begin(), values.end());
  Stat out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() == 1) return out;  // std stays 0
  double acc = 0.0;
  for (double v : values) acc += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(acc / static_cast<double>(values.size() - 1));
  return out;
}

std::vector<AggregateRow> aggregate(const std::vector<RunResult>& results) {
  std::map<std::string, std::vector<const RunResult*>> groups;
  for (const auto& r : results) groups[r.config_hash].push_back(&r);

  std::vector<AggregateRow> rows;
  for (const auto& [hash, members] : groups) {
    AggregateRow row;
    row.config_hash = hash;
    const RunResult& head = *members.front();
    row.backbone = head.backbone;
    row.variant = head.variant;
    row.regime = head.regime;
    row.dataset = head.dataset;
    row.fraction = head.fraction;
    if (head.regime == "crosscity") row.direction = head.train_city + "->" + head.test_city;
    std::vector<const RunResult*> ok;
    for (const RunResult* r : members) {
      if (r->failed) {
        ++row.failed;
      } else {
        ok.push_back(r);
        if (r->diverged) ++row.diverged;
      }
    }
    row.n = ok.size();
    row.single_seed = row.n == 1;
    if (!ok.empty()) {
      for (const std::string& name : metric_names(*ok.front())) {
        std::vector<double> values;
        values.reserve(ok.size());
        for (const RunResult* r : ok) values.push_back(metric_value(*r, name));
        row.metrics.emplace_back(name, mean_std(std::move(values)));
      }
    }
    rows.push_back(std::move(row));
  }
  sort_canonically(rows);
  return rows;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "text") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  if (s == "structured") return ReportFormat::structured;
  throw ConfigError("unknown report format '" + s + "'");
}

namespace {

std::string render_text(const std::vector<AggregateRow>& rows) {
  // columns: identity fields, n, then one mean+/-std column per metric present
  std::vector<std::string> metrics;
  for (const std::string& name : kMetricOrder) {
    for (const auto& row : rows) {
      if (find_metric(row, name)) {
        metrics.push_back(name);
        break;
      }
    }
  }
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header = {"backbone", "variant", "regime", "fraction", "direction",
                                     "n", "note"};
  for (const auto& m : metrics) header.push_back(m);
  table.push_back(header);
  for (const auto& row : rows) {
    std::vector<std::string> cells = {row.backbone,
                                      row.variant,
                                      row.regime,
                                      f3(row.fraction),
                                      row.direction.empty() ? "--" : row.direction,
                                      std::to_string(row.n),
                                      row.failed > 0   ? std::to_string(row.failed) + " failed"
                                      : row.diverged > 0 ? std::to_string(row.diverged) + " diverged"
                                      : row.single_seed  ? "single-seed"
                                                         : ""};
    for (const auto& m : metrics) {
      const Stat* s = find_metric(row, m);
      cells.push_back(s ? f3(s->mean) + "+-" + f3(s->std) : "--");
    }
    table.push_back(std::move(cells));
  }
  std::vector<size_t> widths(header.size(), 0);
  for (const auto& line : table)
    for (size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
  std::string out;
  for (const auto& line : table) {
    for (size_t c = 0; c < line.size(); ++c) {
      out += line[c];
      if (c + 1 < line.size()) out += std::string(widths[c] - line[c].size() + 2, ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += "\n";
  }
  return out;
}

std::string render_csv(const std::vector<AggregateRow>& rows) {
  std::string out =
      "config_hash,backbone,variant,regime,dataset,direction,fraction,n,failed,diverged,"
      "single_seed";
  for (const auto& m : kMetricOrder) out += "," + m + "_mean," + m + "_std";
  out += "\n";
  for (const auto& row : rows) {
    out += csv_escape(row.config_hash) + "," + csv_escape(row.backbone) + "," +
           csv_escape(row.variant) + "," + csv_escape(row.regime) + "," +
           csv_escape(row.dataset) + "," + csv_escape(row.direction) + "," + g17(row.fraction) +
           "," + std::to_string(row.n) + "," + std::to_string(row.failed) + "," +
           std::to_string(row.diverged) + "," + (row.single_seed ? "true" : "false");
    for (const auto& m : kMetricOrder) {
      out += "," + row_cell(row, m, true) + "," + row_cell(row, m, false);
    }
    out += "\n";
  }
  return out;
}

// JSON has no inf/nan literals; diverged groups carry them as string tokens.
json stat_num_to_json(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double stat_num_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw DataError("stat value must be a number or 'inf'/'-inf'/'nan'");
}

json row_to_json(const AggregateRow& row) {
  json metrics = json::object();
  for (const auto& [name, s] : row.metrics) {
    metrics[name] = json{{"mean", stat_num_to_json(s.mean)}, {"std", stat_num_to_json(s.std)}};
  }
  return json{{"config_hash", row.config_hash},
              {"backbone", row.backbone},
              {"variant", row.variant},
              {"regime", row.regime},
              {"dataset", row.dataset},
              {"direction", row.direction},
              {"fraction", row.fraction},
              {"n", row.n},
              {"failed", row.failed},
              {"diverged", row.diverged},
              {"single_seed", row.single_seed},
              {"metrics", metrics}};
}

AggregateRow row_from_json(const json& j) {
  AggregateRow row;
  try {
    row.config_hash = j.at("config_hash").get<std::string>();
    row.backbone = j.at("backbone").get<std::string>();
    row.variant = j.at("variant").get<std::string>();
    row.regime = j.at("regime").get<std::string>();
    row.dataset = j.at("dataset").get<std::string>();
    row.direction = j.at("direction").get<std::string>();
    row.fraction = j.at("fraction").get<double>();
    row.n = j.at("n").get<size_t>();
    row.failed = j.at("failed").get<size_t>();
    row.diverged = j.at("diverged").get<size_t>();
    row.single_seed = j.at("single_seed").get<bool>();
    const json& metrics = j.at("metrics");
    for (const std::string& name : kMetricOrder) {  // canonical order restored
      if (!metrics.contains(name)) continue;
      Stat s;
      s.mean = stat_num_from_json(metrics.at(name).at("mean"));
      s.std = stat_num_from_json(metrics.at(name).at("std"));
      row.metrics.emplace_back(name, s);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed aggregate row: ") + e.what());
  }
  return row;
}

}  // namespace

std::string render_aggregate(const std::vector<AggregateRow>& rows, ReportFormat fmt) {
  switch (fmt) {
    case ReportFormat::text: return render_text(rows);
    case ReportFormat::csv: return render_csv(rows);
    case ReportFormat::structured: {
      json out = json::array();
      for (const auto& row : rows) out.push_back(row_to_json(row));
      return json{{"rows", out}}.dump(2) + "\n";
    }
  }
  throw ConfigError("unknown report format");
}

std::vector<AggregateRow> parse_aggregate_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("aggregate csv is empty");
  auto header = split_csv(line);
  std::string want =
      "config_hash,backbone,variant,regime,dataset,direction,fraction,n,failed,diverged,"
      "single_seed";
  std::vector<std::string> want_cells = split_csv(want);
  for (const auto& m : kMetricOrder) {
    want_cells.push_back(m + "_mean");
    want_cells.push_back(m + "_std");
  }
  if (header != want_cells) throw DataError("aggregate csv has an unexpected header");
  std::vector<AggregateRow> rows;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw DataError("aggregate csv line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    }
    AggregateRow row;
    row.config_hash = cells[0];
    row.backbone = cells[1];
    row.variant = cells[2];
    row.regime = cells[3];
    row.dataset = cells[4];
    row.direction = cells[5];
    row.fraction = parse_double(cells[6], "fraction");
    row.n = static_cast<size_t>(parse_double(cells[7], "n"));
    row.failed = static_cast<size_t>(parse_double(cells[8], "failed"));
    row.diverged = static_cast<size_t>(parse_double(cells[9], "diverged"));
    if (cells[10] != "true" && cells[10] != "false") {
      throw DataError("aggregate csv line " + std::to_string(line_no) + ": bad single_seed flag");
    }
    row.single_seed = cells[10] == "true";
    for (size_t m = 0; m < kMetricOrder.size(); ++m) {
      const std::string& mc = cells[11 + 2 * m];
      const std::string& sc = cells[12 + 2 * m];
      if (mc == "--" && sc == "--") continue;
      Stat s;
      s.mean = parse_double(mc, kMetricOrder[m] + "_mean");
      s.std = parse_double(sc, kMetricOrder[m] + "_std");
      row.metrics.emplace_back(kMetricOrder[m], s);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AggregateRow> parse_aggregate_structured(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("structured report is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("rows")) {
    throw DataError("structured report must be an object with a 'rows' array");
  }
  std::vector<AggregateRow> rows;
  for (const auto& rj : j.at("rows")) rows.push_back(row_from_json(rj));
  return rows;
}

std::string render_variant_table(const std::vector<AggregateRow>& rows) {
  // pivot on (backbone x variant); cell metric is mse, or ade for trajectories
  std::vector<std::string> variants;
  for (const char* v : {"base", "cityid", "citymem"}) {
    for (const auto& row : rows) {
      if (row.variant == v) {
        variants.push_back(v);
        break;
      }
    }
  }
  std::vector<std::string> backbones;
  for (const auto& row : rows) {
    if (std::find(backbones.begin(), backbones.end(), row.backbone) == backbones.end()) {
      backbones.push_back(row.backbone);
    }
  }
  std::sort(backbones.begin(), backbones.end());

  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header = {"backbone"};
  for (const auto& v : variants) header.push_back(v);
  table.push_back(header);
  for (const auto& b : backbones) {
    std::vector<std::string> line = {b};
    for (const auto& v : variants) {
      std::string cell = "--";
      for (const auto& row : rows) {
        if (row.backbone != b || row.variant != v) continue;
        const Stat* s = find_metric(row, "mse");
        if (!s) s = find_metric(row, "ade");
        if (!s) continue;  // e.g. crosscity rows carry pre/post only
        cell = f3(s->mean) + "+-" + f3(s->std);
        break;
      }
      line.push_back(cell);
    }
    table.push_back(std::move(line));
  }
  std::vector<size_t> widths(header.size(), 0);
  for (const auto& line : table)
    for (size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
  std::string out;
  for (const auto& line : table) {
    for (size_t c = 0; c < line.size(); ++c) {
      out += line[c];
      if (c + 1 < line.size()) out += std::string(widths[c] - line[c].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

std::string render_transfer_table(const std::vector<AggregateRow>& rows) {
  std::vector<std::vector<std::string>> table;
  table.push_back({"train_city", "test_city", "model", "Pre", "Post"});
  for (const auto& row : rows) {
    if (row.regime != "crosscity") continue;
    std::string train = row.direction, test;
    size_t arrow = train.find("->");
    if (arrow != std::string::npos) {
      test = train.substr(arrow + 2);
      train = train.substr(0, arrow);
    }
    const Stat* pre = find_metric(row, "pre");
    const Stat* post = find_metric(row, "post");
    table.push_back({train, test, row.backbone + "-" + row.variant,
                     pre ? f3(pre->mean) + "+-" + f3(pre->std) : "--",
                     post ? f3(post->mean) + "+-" + f3(post->std) : "--"});
  }
  std::vector<size_t> widths(5, 0);
  for (const auto& line : table)
    for (size_t c = 0; c < 5; ++c) widths[c] = std::max(widths[c], line[c].size());
  std::string out;
  for (const auto& line : table) {
    for (size_t c = 0; c < 5; ++c) {
      out += line[c];
      if (c + 1 < 5) out += std::string(widths[c] - line[c].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

std::string render_lowdata_points(const std::vector<AggregateRow>& rows) {
  std::string out = "backbone,variant,fraction,mean,std\n";
  std::vector<const AggregateRow*> picked;
  for (const auto& row : rows)
    if (row.regime == "lowdata" || row.regime == "full") picked.push_back(&row);
  std::sort(picked.begin(), picked.end(), [](const AggregateRow* a, const AggregateRow* b) {
    return std::tie(a->backbone, a->variant, a->fraction) <
           std::tie(b->backbone, b->variant, b->fraction);
  });
  for (const AggregateRow* row : picked) {
    const Stat* s = find_metric(*row, "mse");
    if (!s) s = find_metric(*row, "ade");
    if (!s) continue;
    out += row->backbone + "," + row->variant + "," + g17(row->fraction) + "," + g17(s->mean) +
           "," + g17(s->std) + "\n";
  }
  return out;
}

std::string render_adaptation_curves(const std::vector<RunResult>& results) {
  std::string out = "backbone,variant,seed,step,value\n";
  std::vector<const RunResult*> picked;
  for (const auto& r : results)
    if (!r.curve.empty()) picked.push_back(&r);
  std::sort(picked.begin(), picked.end(), [](const RunResult* a, const RunResult* b) {
    return std::tie(a->backbone, a->variant, a->seed) < std::tie(b->backbone, b->variant, b->seed);
  });
  for (const RunResult* r : picked) {
    for (const auto& [step, value] : r->curve) {
      out += r->backbone + "," + r->variant + "," + std::to_string(r->seed) + "," +
             std::to_string(step) + "," + g17(value) + "\n";
    }
  }
  return out;
}

std::vector<AttentionSummaryRow> attention_report(const std::vector<AttentionRecord>& records,
                                                  size_t period, size_t buckets) {
  if (period == 0 || buckets == 0) throw ConfigError("attention report needs period, buckets >= 1");
  if (records.empty()) return {};
  size_t slots = records.front().alpha.size();
  // (city, bucket) -> per-slot sums and count
  std::map<std::pair<size_t, size_t>, std::pair<std::vector<double>, size_t>> acc;
  for (const auto& rec : records) {
    if (rec.alpha.size() != slots) {
      throw DataError("attention records disagree on slot count");
    }
    size_t bucket = (rec.time % period) * buckets / period;
    auto& slot = acc[{rec.city, bucket}];
    if (slot.first.empty()) slot.first.assign(slots, 0.0);
    for (size_t k = 0; k < slots; ++k) slot.first[k] += rec.alpha[k];
    ++slot.second;
  }
  std::vector<AttentionSummaryRow> out;
  for (const auto& [key, val] : acc) {
    for (size_t k = 0; k < slots; ++k) {
      AttentionSummaryRow row;
      row.city = key.first;
      row.bucket = key.second;
      row.slot = k;
      row.mean_alpha = val.first[k] / static_cast<double>(val.second);
      row.count = val.second;
      out.push_back(row);
    }
  }
  return out;
}

std::string render_attention(const std::vector<AttentionSummaryRow>& rows, ReportFormat fmt) {
  if (fmt == ReportFormat::structured) {
    json arr = json::array();
    for (const auto& r : rows) {
      arr.push_back(json{{"city", r.city},
                         {"bucket", r.bucket},
                         {"slot", r.slot},
                         {"mean_alpha", r.mean_alpha},
                         {"count", r.count}});
    }
    json out{{"rows", arr}};
    if (rows.empty()) out["warning"] = "no attention records";
    return out.dump(2) + "\n";
  }
  if (fmt == ReportFormat::csv) {
    std::string out = "city,bucket,slot,mean_alpha,count\n";
    for (const auto& r : rows) {
      out += std::to_string(r.city) + "," + std::to_string(r.bucket) + "," +
             std::to_string(r.slot) + "," + g17(r.mean_alpha) + "," + std::to_string(r.count) +
             "\n";
    }
    return out;
  }
  if (rows.empty()) return "warning: no attention records\n";
  std::vector<std::vector<std::string>> table;
  table.push_back({"city", "bucket", "slot", "mean_alpha", "count"});
  for (const auto& r : rows) {
    table.push_back({std::to_string(r.city), std::to_string(r.bucket), std::to_string(r.slot),
                     f3(r.mean_alpha), std::to_string(r.count)});
  }
  std::vector<size_t> widths(5, 0);
  for (const auto& line : table)
    for (size_t c = 0; c < 5; ++c) widths[c] = std::max(widths[c], line[c].size());
  std::string out;
  for (const auto& line : table) {
    for (size_t c = 0; c < 5; ++c) {
      out += line[c];
      if (c + 1 < 5) out += std::string(widths[c] - line[c].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

}  // namespace citycond
