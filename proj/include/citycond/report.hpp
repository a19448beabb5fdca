#pragma once

#include <string>
#include <utility>
#include <vector>

#include "citycond/citycond_layer.hpp"
#include "citycond/engine.hpp"

namespace citycond {

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample std (n - 1); zero for a single value
};

// Values are sorted before accumulation so any permutation of the inputs
// yields bit-identical statistics.
Stat mean_std(std::vector<double> values);

struct AggregateRow {
  std::string config_hash;  // shared by all seeds of the group
  std::string backbone, variant, regime, dataset, direction;
  double fraction = 1.0;
  size_t n = 0;  // seeds that finished
  size_t failed = 0, diverged = 0;
  bool single_seed = false;  // n == 1: std carries no information
  std::vector<std::pair<std::string, Stat>> metrics;  // canonical metric order
};

// Groups results by config hash (seeds collapse, everything else separates)
// and reports mean +/- sample std per metric. Failed runs are counted but
// excluded from the statistics. Output order is canonical, so aggregation is
// invariant under permutation of the input records.
std::vector<AggregateRow> aggregate(const std::vector<RunResult>& results);

enum class ReportFormat { text, csv, structured };
ReportFormat report_format_from_string(const std::string& s);

// text: aligned, %.3f. csv: %.17g, lossless round trip. structured: JSON.
// Absent metrics render as "--" in text and csv.
std::string render_aggregate(const std::vector<AggregateRow>& rows, ReportFormat fmt);
std::vector<AggregateRow> parse_aggregate_csv(const std::string& text);
std::vector<AggregateRow> parse_aggregate_structured(const std::string& text);

// Pivot table: backbones as rows, variants as columns, headline metric cells
// (denormalized test MSE, or ADE for trajectory groups).
std::string render_variant_table(const std::vector<AggregateRow>& rows);

// Transfer results: train_city / test_city / model / Pre / Post.
std::string render_transfer_table(const std::vector<AggregateRow>& rows);

// Plot feeds, both plain csv.
std::string render_lowdata_points(const std::vector<AggregateRow>& rows);
std::string render_adaptation_curves(const std::vector<RunResult>& results);

// Per-slot mean attention mass by (city, time-of-day bucket).
struct AttentionSummaryRow {
  size_t city = 0, bucket = 0, slot = 0;
  double mean_alpha = 0.0;
  size_t count = 0;  // records contributing to the bucket
};
std::vector<AttentionSummaryRow> attention_report(const std::vector<AttentionRecord>& records,
                                                  size_t period, size_t buckets = 24);
std::string render_attention(const std::vector<AttentionSummaryRow>& rows, ReportFormat fmt);

}  // namespace citycond
