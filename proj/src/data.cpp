#include "citycond/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace citycond {

namespace {

constexpr double kStdFloor = 1e-6;

double parse_number(const std::string& cell, size_t line_no, const std::string& path) {
  double out = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end) {
    throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse number '" + cell + "'");
  }
  return out;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

std::pair<size_t, size_t> split_bounds(size_t t, const SplitRatios& ratios) {
  double total = ratios.train + ratios.val + ratios.test;
  if (total <= 0.0 || ratios.train <= 0.0 || ratios.val < 0.0 || ratios.test < 0.0) {
    throw ConfigError("split ratios must be positive and sum to a positive total");
  }
  // nudge before flooring so exact-decimal ratios land on the intended step
  double scale = static_cast<double>(t) / total;
  size_t train_end = static_cast<size_t>(std::floor(ratios.train * scale + 1e-9));
  size_t val_end =
      static_cast<size_t>(std::floor((ratios.train + ratios.val) * scale + 1e-9));
  return {std::min(train_end, t), std::min(std::max(val_end, train_end), t)};
}

void zscore_fit_transform(CitySeries& series, size_t train_len) {
  if (train_len == 0) throw ConfigError("zscore: empty training range");
  if (train_len > series.t_len()) {
    throw ConfigError("zscore: training range exceeds series length");
  }
  size_t n = series.n_nodes(), d = series.d_x();
  series.stats.mean.assign(n * d, 0.0);
  series.stats.std.assign(n * d, 0.0);
  auto& vals = series.values.raw_data();
  for (size_t t = 0; t < train_len; ++t)
    for (size_t i = 0; i < n * d; ++i) series.stats.mean[i] += vals[t * n * d + i];
  for (double& m : series.stats.mean) m /= static_cast<double>(train_len);
  for (size_t t = 0; t < train_len; ++t) {
    for (size_t i = 0; i < n * d; ++i) {
      double c = vals[t * n * d + i] - series.stats.mean[i];
      series.stats.std[i] += c * c;
    }
  }
  for (double& s : series.stats.std) {
    s = std::max(std::sqrt(s / static_cast<double>(train_len)), kStdFloor);
  }
  for (size_t t = 0; t < series.t_len(); ++t)
    for (size_t i = 0; i < n * d; ++i)
      vals[t * n * d + i] = (vals[t * n * d + i] - series.stats.mean[i]) / series.stats.std[i];
  series.normalized = true;
}

Tensor denormalize(const CitySeries& series, const Tensor& block) {
  if (!series.normalized) return block;
  size_t l = block.dim(0), n = block.dim(1), d = block.dim(2);
  std::vector<double> out(block.data());
  for (size_t t = 0; t < l; ++t)
    for (size_t i = 0; i < n * d; ++i)
      out[t * n * d + i] = out[t * n * d + i] * series.stats.std[i] + series.stats.mean[i];
  return Tensor::from_data(block.shape(), std::move(out));
}

SplitWindows build_windows(const std::vector<CitySeries>& cities, size_t l_h, size_t l_f,
                           const SplitRatios& ratios, bool trajectory) {
  if (l_h < 1 || l_f < 1) throw ConfigError("window lengths must be >= 1");
  SplitWindows out;
  out.train.split = "train";
  out.val.split = "val";
  out.test.split = "test";
  for (const CitySeries& s : cities) {
    auto [train_end, val_end] = split_bounds(s.t_len(), ratios);
    size_t agents = trajectory ? s.n_nodes() : 1;
    auto emit = [&](WindowIndex& idx, size_t lo, size_t hi) {
      if (hi - lo < l_h + l_f) return;  // split too short: zero windows
      size_t count = (hi - lo) - (l_h + l_f) + 1;
      for (size_t a = 0; a < agents; ++a)
        for (size_t w = 0; w < count; ++w) idx.windows.push_back({s.city, a, lo + w});
    };
    emit(out.train, 0, train_end);
    emit(out.val, train_end, val_end);
    emit(out.test, val_end, s.t_len());
  }
  return out;
}

WindowIndex subsample_lowdata(const WindowIndex& index, double frac, uint64_t seed) {
  if (!(frac > 0.0 && frac <= 1.0)) {
    throw ConfigError("subsample fraction must lie in (0, 1], got " + std::to_string(frac));
  }
  // group windows per city, then sample ceil(frac * n_c) from each
  size_t max_city = 0;
  for (const auto& w : index.windows) max_city = std::max(max_city, w.city);
  std::vector<std::vector<WindowRef>> per_city(max_city + 1);
  for (const auto& w : index.windows) per_city[w.city].push_back(w);

  WindowIndex out;
  out.split = index.split;
  Rng rng = Rng(seed).fork("subsample");
  for (size_t c = 0; c < per_city.size(); ++c) {
    auto& pool = per_city[c];
    if (pool.empty()) continue;
    size_t keep = static_cast<size_t>(
        std::ceil(frac * static_cast<double>(pool.size())) + 0.5);
    keep = std::min(std::max<size_t>(keep, 1), pool.size());
    if (keep == pool.size()) {  // keeping everything is a strict no-op
      for (const auto& w : pool) out.windows.push_back(w);
      continue;
    }
    Rng crng = rng.fork(c);
    for (size_t i = 0; i < keep; ++i) {  // partial Fisher-Yates
      size_t j = i + crng.below(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.windows.push_back(pool[i]);
    }
  }
  return out;
}

namespace {

Tensor copy_block(const CitySeries& series, size_t start, size_t len, bool trajectory,
                  size_t agent) {
  size_t n = series.n_nodes(), d = series.d_x();
  const auto& vals = series.values.data();
  if (start + len > series.t_len()) {
    throw DataError("window [" + std::to_string(start) + "," + std::to_string(start + len) +
                    ") exceeds series length " + std::to_string(series.t_len()));
  }
  if (trajectory) {
    if (agent >= n) throw DataError("agent index out of range");
    std::vector<double> out(len * d);
    for (size_t t = 0; t < len; ++t)
      for (size_t k = 0; k < d; ++k) out[t * d + k] = vals[((start + t) * n + agent) * d + k];
    return Tensor::from_data({len, d}, std::move(out));
  }
  std::vector<double> out(len * n * d);
  std::copy(vals.begin() + start * n * d, vals.begin() + (start + len) * n * d, out.begin());
  return Tensor::from_data({len, n, d}, std::move(out));
}

}  // namespace

Tensor history_window(const CitySeries& series, const WindowRef& ref, size_t l_h, bool trajectory) {
  return copy_block(series, ref.start, l_h, trajectory, ref.agent);
}

Tensor future_window(const CitySeries& series, const WindowRef& ref, size_t l_h, size_t l_f,
                     bool trajectory) {
  return copy_block(series, ref.start + l_h, l_f, trajectory, ref.agent);
}

std::vector<size_t> MultiCityDataset::city_nodes() const {
  std::vector<size_t> out;
  out.reserve(cities.size());
  for (const auto& c : cities) out.push_back(c.n_nodes());
  return out;
}

const Adjacency* MultiCityDataset::adjacency_for(size_t city) const {
  if (city >= cities.size() || !cities[city].adjacency.has_value()) return nullptr;
  return &cities[city].adjacency.value();
}

MultiCityDataset build_dataset(std::vector<CitySeries> cities, size_t l_h, size_t l_f,
                               bool trajectory, const SplitRatios& ratios) {
  if (cities.empty()) throw DataError("dataset needs at least one city");
  for (size_t c = 0; c < cities.size(); ++c) {
    if (cities[c].t_len() < l_h + l_f) {
      throw DataError("city " + cities[c].name + " has " + std::to_string(cities[c].t_len()) +
                      " steps, fewer than one window (" + std::to_string(l_h + l_f) + ")");
    }
    cities[c].city = c;
  }
  MultiCityDataset ds;
  ds.trajectory = trajectory;
  ds.l_h = l_h;
  ds.l_f = l_f;
  ds.ratios = ratios;
  if (!trajectory) {
    for (auto& c : cities) {
      auto [train_end, val_end] = split_bounds(c.t_len(), ratios);
      (void)val_end;
      zscore_fit_transform(c, train_end);
    }
  }
  ds.splits = build_windows(cities, l_h, l_f, ratios, trajectory);
  ds.cities = std::move(cities);
  return ds;
}

// ------------------------------------------------------------ synthetic data

void SyntheticSpec::validate() const {
  if (num_cities == 0 || n_nodes == 0 || t_len == 0 || n_motifs == 0 || period == 0) {
    throw ConfigError("synthetic spec requires positive counts");
  }
  if (diffusion < 0.0 || diffusion > 1.0) {
    throw ConfigError("diffusion strength must lie in [0, 1]");
  }
  if (noise_std < 0.0) throw ConfigError("noise std must be nonnegative");
}

double synthetic_motif(const SyntheticGroundTruth& gt, size_t s, size_t t) {
  double p = static_cast<double>(gt.period);
  double tod = static_cast<double>(t % gt.period);
  double two_pi = 2.0 * 3.14159265358979323846;
  double day = std::sin(two_pi * (static_cast<double>(t) / p + gt.motif_phase[s]));
  double sigma = p / 16.0;
  double morning = p * 8.0 / 24.0, evening = p * 18.0 / 24.0;
  auto bump = [&](double mu) {
    double d = tod - mu;
    return std::exp(-d * d / (2.0 * sigma * sigma));
  };
  return day + gt.motif_morning[s] * bump(morning) + gt.motif_evening[s] * bump(evening);
}

std::pair<std::vector<CitySeries>, SyntheticGroundTruth> generate_synthetic(
    const SyntheticSpec& spec) {
  spec.validate();
  Rng root(Rng::splitmix(spec.seed ^ 0x9e3779b97f4a7c15ULL));

  // shared geometry: one graph for all cities so that cities with identical
  // mixing weights produce identical series up to noise
  Rng graph_rng = root.fork("graph");
  size_t n = spec.n_nodes;
  std::vector<double> xs(n), ys(n);
  for (size_t i = 0; i < n; ++i) {
    xs[i] = graph_rng.uniform();
    ys[i] = graph_rng.uniform();
  }
  std::vector<double> a(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dx = xs[i] - xs[j], dy = ys[i] - ys[j];
      double w = std::exp(-(dx * dx + dy * dy) / (spec.kernel_sigma * spec.kernel_sigma));
      if (w >= spec.kernel_threshold) a[i * n + j] = w;
    }
  }
  Adjacency adj(Tensor::from_data({n, n}, a));

  SyntheticGroundTruth gt;
  gt.period = spec.period;
  Rng motif_rng = root.fork("motifs");
  for (size_t s = 0; s < spec.n_motifs; ++s) {
    gt.motif_phase.push_back(static_cast<double>(s) / static_cast<double>(spec.n_motifs));
    gt.motif_morning.push_back(motif_rng.uniform(0.5, 1.5));
    gt.motif_evening.push_back(motif_rng.uniform(0.5, 1.5));
  }
  Rng load_rng = root.fork("loadings");
  gt.loadings.assign(spec.n_motifs, std::vector<double>(n));
  for (size_t s = 0; s < spec.n_motifs; ++s)
    for (size_t i = 0; i < n; ++i) gt.loadings[s][i] = load_rng.uniform(0.5, 1.5);
  Rng weight_rng = root.fork("weights");
  gt.weights.assign(spec.num_cities, std::vector<double>(spec.n_motifs));
  for (size_t c = 0; c < spec.num_cities; ++c)
    for (size_t s = 0; s < spec.n_motifs; ++s)
      gt.weights[c][s] = 1.0 + spec.weight_spread * weight_rng.uniform(-1.0, 1.0);

  const auto& prop = adj.prop.data();
  std::vector<CitySeries> cities;
  double two_pi = 2.0 * 3.14159265358979323846;
  for (size_t c = 0; c < spec.num_cities; ++c) {
    Rng noise_rng = root.fork("noise." + std::to_string(c));
    std::vector<double> vals(spec.t_len * n);
    std::vector<double> row(n), diffused(n);
    for (size_t t = 0; t < spec.t_len; ++t) {
      for (size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (size_t s = 0; s < spec.n_motifs; ++s)
          v += gt.weights[c][s] * gt.loadings[s][i] * synthetic_motif(gt, s, t);
        row[i] = spec.motif_scale * v;
      }
      for (size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += prop[i * n + j] * row[j];
        diffused[i] = (1.0 - spec.diffusion) * row[i] + spec.diffusion * acc;
      }
      double city_component =
          spec.city_amp * std::sin(two_pi * (static_cast<double>(t) /
                                                 (2.5 * static_cast<double>(spec.period)) +
                                             static_cast<double>(c) /
                                                 static_cast<double>(spec.num_cities)));
      for (size_t i = 0; i < n; ++i) {
        vals[t * n + i] = spec.base_level + diffused[i] + city_component +
                          spec.noise_std * noise_rng.normal();
      }
    }
    CitySeries series;
    series.city = c;
    series.name = "city" + std::to_string(c);
    series.values = Tensor::from_data({spec.t_len, n, 1}, std::move(vals));
    series.adjacency = adj;
    cities.push_back(std::move(series));
  }
  return {std::move(cities), std::move(gt)};
}

void TrajectorySpec::validate() const {
  if (num_cities == 0 || num_agents == 0 || t_len < 2) {
    throw ConfigError("trajectory spec requires positive counts and t_len >= 2");
  }
  if (dt <= 0.0 || speed_min <= 0.0 || speed_max < speed_min) {
    throw ConfigError("trajectory spec has invalid kinematics");
  }
  if (turn_prob < 0.0 || turn_prob > 1.0) throw ConfigError("turn_prob must lie in [0, 1]");
}

std::vector<CitySeries> generate_synthetic_trajectories(const TrajectorySpec& spec) {
  spec.validate();
  Rng root(Rng::splitmix(spec.seed ^ 0x7f4a7c159e3779b9ULL));
  const double area = 100.0;           // meters
  const double box_lo = 35.0, box_hi = 65.0;  // crossing region

  std::vector<CitySeries> cities;
  for (size_t c = 0; c < spec.num_cities; ++c) {
    Rng crng = root.fork("city." + std::to_string(c));
    double city_scale = 1.0 + 0.25 * static_cast<double>(c);
    std::vector<double> vals(spec.t_len * spec.num_agents * 2);
    for (size_t a = 0; a < spec.num_agents; ++a) {
      size_t side = crng.below(4);
      double along = crng.uniform(20.0, 80.0);
      double px = side == 0 ? 0.0 : side == 1 ? area : along;
      double py = side == 0 || side == 1 ? along : (side == 2 ? 0.0 : area);
      double heading = side == 0 ? 0.0 : side == 1 ? 3.14159265358979323846
                       : side == 2 ? 1.5707963267948966
                                   : -1.5707963267948966;
      double speed = crng.uniform(spec.speed_min, spec.speed_max) * city_scale;
      double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
      bool turned = false;
      for (size_t t = 0; t < spec.t_len; ++t) {
        vals[(t * spec.num_agents + a) * 2 + 0] = px;
        vals[(t * spec.num_agents + a) * 2 + 1] = py;
        if (!turned && px > box_lo && px < box_hi && py > box_lo && py < box_hi &&
            crng.uniform() < spec.turn_prob) {
          // 90-degree turn event inside the crossing region
          double sign = crng.below(2) == 0 ? 1.0 : -1.0;
          double nvx = -sign * vy, nvy = sign * vx;
          vx = nvx;
          vy = nvy;
          turned = true;
        }
        px += vx * spec.dt;
        py += vy * spec.dt;
      }
    }
    CitySeries series;
    series.city = c;
    series.name = "city" + std::to_string(c);
    series.values = Tensor::from_data({spec.t_len, spec.num_agents, 2}, std::move(vals));
    cities.push_back(std::move(series));
  }
  return cities;
}

// ------------------------------------------------------------------ CSV I/O

CitySeries load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  auto header = split_line(line);
  if (header.size() < 2 || header[0] != "timestamp") {
    throw DataError(path + ":1: header must be 'timestamp,<node>,...'");
  }
  size_t n = header.size() - 1;
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> present;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    }
    std::vector<double> row(n, 0.0);
    std::vector<bool> have(n, false);
    for (size_t i = 0; i < n; ++i) {
      if (cells[i + 1].empty()) continue;  // missing cell
      row[i] = parse_number(cells[i + 1], line_no, path);
      have[i] = true;
    }
    rows.push_back(std::move(row));
    present.push_back(std::move(have));
  }
  if (rows.empty()) throw DataError(path + ": no data rows");

  // forward-fill, then back-fill leading gaps
  for (size_t i = 0; i < n; ++i) {
    bool any = false;
    for (size_t t = 0; t < rows.size(); ++t) any = any || present[t][i];
    if (!any) throw DataError(path + ": column '" + header[i + 1] + "' has no values");
    for (size_t t = 1; t < rows.size(); ++t) {
      if (!present[t][i] && present[t - 1][i]) {
        rows[t][i] = rows[t - 1][i];
        present[t][i] = true;
      }
    }
    for (size_t t = rows.size(); t-- > 1;) {
      if (!present[t - 1][i] && present[t][i]) {
        rows[t - 1][i] = rows[t][i];
        present[t - 1][i] = true;
      }
    }
  }

  std::vector<double> vals(rows.size() * n);
  for (size_t t = 0; t < rows.size(); ++t)
    for (size_t i = 0; i < n; ++i) vals[t * n + i] = rows[t][i];
  CitySeries series;
  series.name = path;
  series.values = Tensor::from_data({rows.size(), n, 1}, std::move(vals));
  return series;
}

Adjacency load_adjacency_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::vector<std::vector<double>> rows;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split_line(line);
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& cell : cells) row.push_back(parse_number(cell, line_no, path));
    if (!rows.empty() && row.size() != rows[0].size()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": ragged adjacency row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.size() != rows[0].size()) {
    throw DataError(path + ": adjacency must be a square matrix");
  }
  size_t n = rows.size();
  std::vector<double> a(n * n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) a[i * n + j] = rows[i][j];
  return Adjacency(Tensor::from_data({n, n}, std::move(a)));
}

void export_csv(const CitySeries& series, const std::string& path) {
  if (series.d_x() != 1) throw DataError("csv export supports d_x = 1 series only");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "timestamp";
  for (size_t i = 0; i < series.n_nodes(); ++i) out << ",n" << i;
  out << "\n";
  char buf[32];
  const auto& vals = series.values.data();
  size_t n = series.n_nodes();
  for (size_t t = 0; t < series.t_len(); ++t) {
    out << t;
    for (size_t i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", vals[t * n + i]);
      out << ',' << buf;
    }
    out << "\n";
  }
}

void export_adjacency_csv(const Adjacency& adj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  char buf[32];
  size_t n = adj.n();
  const auto& a = adj.a.data();
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", a[i * n + j]);
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
}

// -------------------------------------------------------- dataset references

namespace {

bool ref_has_scheme(const std::string& ref, const std::string& scheme) {
  if (ref == scheme) return true;
  return ref.size() > scheme.size() && ref.compare(0, scheme.size(), scheme) == 0 &&
         ref[scheme.size()] == ':';
}

std::vector<std::pair<std::string, std::string>> parse_ref_options(const std::string& ref) {
  std::vector<std::pair<std::string, std::string>> kvs;
  auto colon = ref.find(':');
  if (colon == std::string::npos) return kvs;
  std::stringstream ss(ref.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("dataset option '" + item + "' is not key=value");
    }
    kvs.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return kvs;
}

double ref_double(const std::string& key, const std::string& value) {
  double d = 0.0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), d);
  if (ec != std::errc() || p != value.data() + value.size()) {
    throw ConfigError("dataset option '" + key + "': bad number '" + value + "'");
  }
  return d;
}

size_t ref_count(const std::string& key, const std::string& value) {
  double d = ref_double(key, value);
  if (d < 0.0 || d != std::floor(d)) {
    throw ConfigError("dataset option '" + key + "' must be a non-negative integer");
  }
  return static_cast<size_t>(d + 0.5);
}

}  // namespace

bool ref_is_synthetic(const std::string& ref) { return ref_has_scheme(ref, "synthetic"); }
bool ref_is_trajectory(const std::string& ref) { return ref_has_scheme(ref, "trajectory"); }

SyntheticSpec synthetic_spec_from_ref(const std::string& ref) {
  SyntheticSpec spec;
  for (const auto& [k, v] : parse_ref_options(ref)) {
    if (k == "num_cities") spec.num_cities = ref_count(k, v);
    else if (k == "n_nodes") spec.n_nodes = ref_count(k, v);
    else if (k == "t_len") spec.t_len = ref_count(k, v);
    else if (k == "n_motifs") spec.n_motifs = ref_count(k, v);
    else if (k == "period") spec.period = ref_count(k, v);
    else if (k == "base_level") spec.base_level = ref_double(k, v);
    else if (k == "motif_scale") spec.motif_scale = ref_double(k, v);
    else if (k == "city_amp") spec.city_amp = ref_double(k, v);
    else if (k == "noise_std") spec.noise_std = ref_double(k, v);
    else if (k == "diffusion") spec.diffusion = ref_double(k, v);
    else if (k == "weight_spread") spec.weight_spread = ref_double(k, v);
    else if (k == "kernel_sigma") spec.kernel_sigma = ref_double(k, v);
    else if (k == "kernel_threshold") spec.kernel_threshold = ref_double(k, v);
    else if (k == "seed") spec.seed = static_cast<uint64_t>(ref_count(k, v));
    else throw ConfigError("unknown synthetic option '" + k + "'");
  }
  spec.validate();
  return spec;
}

TrajectorySpec trajectory_spec_from_ref(const std::string& ref) {
  TrajectorySpec spec;
  for (const auto& [k, v] : parse_ref_options(ref)) {
    if (k == "num_cities") spec.num_cities = ref_count(k, v);
    else if (k == "num_agents") spec.num_agents = ref_count(k, v);
    else if (k == "t_len") spec.t_len = ref_count(k, v);
    else if (k == "dt") spec.dt = ref_double(k, v);
    else if (k == "speed_min") spec.speed_min = ref_double(k, v);
    else if (k == "speed_max") spec.speed_max = ref_double(k, v);
    else if (k == "turn_prob") spec.turn_prob = ref_double(k, v);
    else if (k == "seed") spec.seed = static_cast<uint64_t>(ref_count(k, v));
    else throw ConfigError("unknown trajectory option '" + k + "'");
  }
  spec.validate();
  return spec;
}

std::vector<CitySeries> load_city_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw DataError("dataset directory '" + dir + "' not found");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string name = entry.path().filename().string();
    if (name.compare(0, 4, "city") != 0) continue;
    if (name.size() < 4 || name.compare(name.size() - 4, 4, ".csv") != 0) continue;
    if (name.size() >= 8 && name.compare(name.size() - 8, 8, "_adj.csv") == 0) continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no city CSV files in '" + dir + "'");
  std::vector<CitySeries> cities;
  for (const auto& f : files) {
    CitySeries s = load_csv(f.string());
    s.name = f.stem().string();
    fs::path adj = f.parent_path() / (f.stem().string() + "_adj.csv");
    if (fs::exists(adj, ec)) s.adjacency = load_adjacency_csv(adj.string());
    cities.push_back(std::move(s));
  }
  return cities;
}

MultiCityDataset dataset_from_ref(const std::string& ref, size_t l_h, size_t l_f,
                                  const SplitRatios& ratios) {
  if (ref_is_trajectory(ref)) {
    auto cities = generate_synthetic_trajectories(trajectory_spec_from_ref(ref));
    return build_dataset(std::move(cities), l_h, l_f, true, ratios);
  }
  if (ref_is_synthetic(ref)) {
    auto generated = generate_synthetic(synthetic_spec_from_ref(ref));
    return build_dataset(std::move(generated.first), l_h, l_f, false, ratios);
  }
  return build_dataset(load_city_dir(ref), l_h, l_f, false, ratios);
}

}  // namespace citycond
