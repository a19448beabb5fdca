#include "citycond/serde.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace citycond {

using nlohmann::json;

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const std::string& scope) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("unknown config key '" + scope + item.key() + "'");
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + scope + key + "' has the wrong type");
  }
}

json regime_to_json(const RegimeConfig& r) {
  return json{{"kind", to_string(r.kind)},
              {"fraction", r.fraction},
              {"source_city", r.source_city},
              {"target_city", r.target_city},
              {"adapt_steps", r.adapt_steps},
              {"shot_count", r.shot_count},
              {"eval_every", r.eval_every}};
}

json citycond_to_json(const CityCondConfig& c) {
  return json{{"d_c", c.d_c},
              {"slots", c.slots},
              {"d_m", c.d_m},
              {"pooling", to_string(c.pooling)},
              {"use_city_embedding_in_query", c.use_city_embedding_in_query}};
}

json config_to_json_obj(const ExperimentConfig& cfg) {
  return json{{"backbone", to_string(cfg.spec.kind)},
              {"variant", to_string(cfg.citycond.variant)},
              {"d_h", cfg.spec.d_h},
              {"layers", cfg.spec.layers},
              {"heads", cfg.spec.heads},
              {"kernel", cfg.spec.kernel},
              {"dilations", cfg.spec.dilations},
              {"head_hidden", cfg.spec.head_hidden},
              {"citycond", citycond_to_json(cfg.citycond)},
              {"regime", regime_to_json(cfg.regime)},
              {"seed", cfg.seed},
              {"lr", cfg.lr},
              {"batch", cfg.batch},
              {"max_epochs", cfg.max_epochs},
              {"patience", cfg.patience},
              {"l_h", cfg.l_h},
              {"l_f", cfg.l_f},
              {"dataset", cfg.dataset}};
}

ExperimentConfig config_from_json_obj(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  expect_keys(j,
              {"backbone", "variant", "d_h", "layers", "heads", "kernel", "dilations",
               "head_hidden", "citycond", "regime", "seed", "lr", "batch", "max_epochs",
               "patience", "l_h", "l_f", "dataset"},
              "");
  ExperimentConfig cfg;
  std::string backbone = to_string(cfg.spec.kind);
  read_key(j, "backbone", backbone, "");
  cfg.spec = BackboneSpec::defaults(backbone_from_string(backbone));
  read_key(j, "d_h", cfg.spec.d_h, "");
  read_key(j, "layers", cfg.spec.layers, "");
  read_key(j, "heads", cfg.spec.heads, "");
  read_key(j, "kernel", cfg.spec.kernel, "");
  read_key(j, "dilations", cfg.spec.dilations, "");
  read_key(j, "head_hidden", cfg.spec.head_hidden, "");

  std::string variant = to_string(cfg.citycond.variant);
  read_key(j, "variant", variant, "");
  cfg.citycond.variant = variant_from_string(variant);
  if (j.contains("citycond")) {
    const json& c = j.at("citycond");
    if (!c.is_object()) throw ConfigError("config key 'citycond' has the wrong type");
    expect_keys(c, {"d_c", "slots", "d_m", "pooling", "use_city_embedding_in_query"},
                "citycond.");
    read_key(c, "d_c", cfg.citycond.d_c, "citycond.");
    read_key(c, "slots", cfg.citycond.slots, "citycond.");
    read_key(c, "d_m", cfg.citycond.d_m, "citycond.");
    std::string pooling = to_string(cfg.citycond.pooling);
    read_key(c, "pooling", pooling, "citycond.");
    cfg.citycond.pooling = pooling_from_string(pooling);
    read_key(c, "use_city_embedding_in_query", cfg.citycond.use_city_embedding_in_query,
             "citycond.");
  }
  if (j.contains("regime")) {
    const json& r = j.at("regime");
    if (!r.is_object()) throw ConfigError("config key 'regime' has the wrong type");
    expect_keys(r,
                {"kind", "fraction", "source_city", "target_city", "adapt_steps", "shot_count",
                 "eval_every"},
                "regime.");
    std::string kind = to_string(cfg.regime.kind);
    read_key(r, "kind", kind, "regime.");
    cfg.regime.kind = regime_from_string(kind);
    read_key(r, "fraction", cfg.regime.fraction, "regime.");
    read_key(r, "source_city", cfg.regime.source_city, "regime.");
    read_key(r, "target_city", cfg.regime.target_city, "regime.");
    read_key(r, "adapt_steps", cfg.regime.adapt_steps, "regime.");
    read_key(r, "shot_count", cfg.regime.shot_count, "regime.");
    read_key(r, "eval_every", cfg.regime.eval_every, "regime.");
  }
  read_key(j, "seed", cfg.seed, "");
  read_key(j, "lr", cfg.lr, "");
  read_key(j, "batch", cfg.batch, "");
  read_key(j, "max_epochs", cfg.max_epochs, "");
  read_key(j, "patience", cfg.patience, "");
  read_key(j, "l_h", cfg.l_h, "");
  read_key(j, "l_f", cfg.l_f, "");
  read_key(j, "dataset", cfg.dataset, "");
  return cfg;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) {
  return config_to_json_obj(cfg).dump(2) + "\n";
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json_obj(j);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  std::string key = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  json j = config_to_json_obj(cfg);
  json* cursor = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = key.find('.', pos);
    std::string part = key.substr(pos, dot - pos);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*cursor)[part] = parsed.is_discarded() ? json(value) : parsed;
      break;
    }
    if (!cursor->contains(part) || !(*cursor)[part].is_object()) {
      throw ConfigError("unknown config key '" + key.substr(0, dot) + "'");
    }
    cursor = &(*cursor)[part];
    pos = dot + 1;
  }
  return config_from_json_obj(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = config_to_json_obj(cfg);
  j.erase("seed");  // the three seeds of one configuration share a hash
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

// JSON has no inf/nan literals; diverged runs carry them as string tokens.
static json metric_to_json(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

static double metric_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw DataError("metric value must be a number or 'inf'/'-inf'/'nan'");
}

static double metric_field(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  return metric_from_json(j.at(key));
}

std::string result_to_json(const RunResult& r) {
  json curve = json::array();
  for (const auto& [step, value] : r.curve) {
    curve.push_back(json::array({step, metric_to_json(value)}));
  }
  json j{{"schema_version", r.schema_version},
         {"config_hash", r.config_hash},
         {"backbone", r.backbone},
         {"variant", r.variant},
         {"regime", r.regime},
         {"dataset", r.dataset},
         {"fraction", r.fraction},
         {"seed", r.seed},
         {"epochs", r.epochs},
         {"train_loss", metric_to_json(r.train_loss)},
         {"val_mse", metric_to_json(r.val_mse)},
         {"trajectory", r.trajectory},
         {"diverged", r.diverged},
         {"failed", r.failed},
         {"error", r.error},
         {"mse", metric_to_json(r.mse)},
         {"mae", metric_to_json(r.mae)},
         {"mse_norm", metric_to_json(r.mse_norm)},
         {"mae_norm", metric_to_json(r.mae_norm)},
         {"ade", metric_to_json(r.ade)},
         {"fde", metric_to_json(r.fde)},
         {"train_city", r.train_city},
         {"test_city", r.test_city},
         {"pre", metric_to_json(r.pre)},
         {"post", metric_to_json(r.post)},
         {"curve", curve}};
  return j.dump();
}

RunResult result_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("result record is not valid JSON: ") + e.what());
  }
  RunResult r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    r.config_hash = j.value("config_hash", "");
    r.backbone = j.value("backbone", "");
    r.variant = j.value("variant", "");
    r.regime = j.value("regime", "");
    r.dataset = j.value("dataset", "");
    r.fraction = j.value("fraction", 1.0);
    r.seed = j.value("seed", uint64_t{0});
    r.epochs = j.value("epochs", size_t{0});
    r.train_loss = metric_field(j, "train_loss", 0.0);
    r.val_mse = metric_field(j, "val_mse", 0.0);
    r.trajectory = j.value("trajectory", false);
    r.diverged = j.value("diverged", false);
    r.failed = j.value("failed", false);
    r.error = j.value("error", "");
    r.mse = metric_field(j, "mse", 0.0);
    r.mae = metric_field(j, "mae", 0.0);
    r.mse_norm = metric_field(j, "mse_norm", 0.0);
    r.mae_norm = metric_field(j, "mae_norm", 0.0);
    r.ade = metric_field(j, "ade", 0.0);
    r.fde = metric_field(j, "fde", 0.0);
    r.train_city = j.value("train_city", "");
    r.test_city = j.value("test_city", "");
    r.pre = metric_field(j, "pre", 0.0);
    r.post = metric_field(j, "post", 0.0);
    if (j.contains("curve")) {
      for (const auto& p : j.at("curve")) {
        r.curve.emplace_back(p.at(0).get<size_t>(), metric_from_json(p.at(1)));
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed result record: ") + e.what());
  }
  return r;
}

void append_results(const std::string& path, const std::vector<RunResult>& results) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write results to '" + path + "'");
  for (const auto& r : results) out << result_to_json(r) << "\n";
}

std::vector<RunResult> load_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results '" + path + "'");
  std::vector<RunResult> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    RunResult r;
    try {
      r = result_from_json_text(line);
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!out.empty() && r.schema_version != out.front().schema_version) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": mixed result schema versions (" +
                      std::to_string(out.front().schema_version) + " and " +
                      std::to_string(r.schema_version) + ")");
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_weights(const Model& model, const std::string& path) {
  json params = json::array();
  for (const auto& p : model.parameters()) {
    params.push_back(json{{"name", p.name}, {"shape", p.tensor.shape()}, {"data", p.tensor.data()}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write weights to '" + path + "'");
  out << json{{"format", 1}, {"params", params}}.dump() << "\n";
}

void load_weights(Model& model, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open weights '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(path + ": invalid weights file: " + e.what());
  }
  if (j.value("format", 0) != 1) throw DataError(path + ": unsupported weights format");
  std::map<std::string, const json*> by_name;
  for (const auto& p : j.at("params")) by_name[p.at("name").get<std::string>()] = &p;
  ParamList params = model.parameters();
  if (by_name.size() != params.size()) {
    throw DataError(path + ": weights hold " + std::to_string(by_name.size()) +
                    " parameters, model expects " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError(path + ": missing parameter '" + p.name + "'");
    Shape shape = it->second->at("shape").get<Shape>();
    if (shape != p.tensor.shape()) {
      throw DataError(path + ": parameter '" + p.name + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(p.tensor.shape()));
    }
    p.tensor.raw_data() = it->second->at("data").get<std::vector<double>>();
  }
}

std::string ground_truth_to_json(const SyntheticGroundTruth& gt) {
  return json{{"motif_phase", gt.motif_phase},
              {"motif_morning", gt.motif_morning},
              {"motif_evening", gt.motif_evening},
              {"weights", gt.weights},
              {"loadings", gt.loadings},
              {"period", gt.period}}
             .dump(2) +
         "\n";
}

void save_ground_truth(const SyntheticGroundTruth& gt, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write ground truth to '" + path + "'");
  out << ground_truth_to_json(gt);
}

void save_attention(const std::string& path, const std::vector<AttentionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write attention records to '" + path + "'");
  for (const auto& r : records) {
    out << json{{"city", r.city}, {"time", r.time}, {"alpha", r.alpha}}.dump() << "\n";
  }
}

std::vector<AttentionRecord> load_attention(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attention records '" + path + "'");
  std::vector<AttentionRecord> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      AttentionRecord r;
      r.city = j.at("city").get<size_t>();
      r.time = j.at("time").get<size_t>();
      r.alpha = j.at("alpha").get<std::vector<double>>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed attention record: " +
                      e.what());
    }
  }
  return out;
}

}  // namespace citycond
