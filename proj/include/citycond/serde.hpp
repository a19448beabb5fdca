#pragma once

#include <string>
#include <vector>

#include "citycond/data.hpp"
#include "citycond/engine.hpp"

namespace citycond {

// Canonical JSON round trip for experiment configs. Parsing is strict:
// unknown or ill-typed keys raise ConfigError instead of being dropped.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Applies one "key=value" override through the canonical JSON form, so the
// same strict validation runs. Nested keys use dots: "regime.fraction=0.1".
// The value is parsed as JSON when possible and treated as a string otherwise.
ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment);

// FNV-1a hash of the canonical config serialization with the seed removed,
// so the three seeds of one configuration share a hash.
std::string config_hash(const ExperimentConfig& cfg);

// Result records as NDJSON (one JSON object per line).
std::string result_to_json(const RunResult& r);
RunResult result_from_json_text(const std::string& text);
void append_results(const std::string& path, const std::vector<RunResult>& results);
std::vector<RunResult> load_results(const std::string& path);

// Model weights, full precision; loading requires an exact name/shape match.
void save_weights(const Model& model, const std::string& path);
void load_weights(Model& model, const std::string& path);

// Synthetic generator audit trail.
std::string ground_truth_to_json(const SyntheticGroundTruth& gt);
void save_ground_truth(const SyntheticGroundTruth& gt, const std::string& path);

// Attention records captured at evaluation time.
void save_attention(const std::string& path, const std::vector<AttentionRecord>& records);
std::vector<AttentionRecord> load_attention(const std::string& path);

}  // namespace citycond
