#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "citycond/backbones.hpp"
#include "citycond/errors.hpp"
#include "citycond/rng.hpp"
#include "citycond/tensor.hpp"

namespace citycond {

// Per-(node, feature) normalization statistics, train-split only.
struct NodeStats {
  std::vector<double> mean;  // [N * d_x]
  std::vector<double> std;   // clamped to >= 1e-6
};

// One city's series: [T x N x d_x] speeds, or [T x A x 2] agent positions.
struct CitySeries {
  size_t city = 0;
  std::string name;
  Tensor values;
  std::optional<Adjacency> adjacency;
  NodeStats stats;
  bool normalized = false;

  size_t t_len() const { return values.dim(0); }
  size_t n_nodes() const { return values.dim(1); }
  size_t d_x() const { return values.dim(2); }
};

struct WindowRef {
  size_t city = 0;
  size_t agent = 0;  // trajectory mode only; 0 for traffic
  size_t start = 0;
};

struct WindowIndex {
  std::string split;  // train | val | test
  std::vector<WindowRef> windows;
};

struct SplitRatios {
  double train = 0.7, val = 0.1, test = 0.2;
};

// Chronological split boundaries for a series of length t: [0, train_end),
// [train_end, val_end), [val_end, t).
std::pair<size_t, size_t> split_bounds(size_t t, const SplitRatios& ratios);

// In-place per-node z-score using only the first train_len steps.
void zscore_fit_transform(CitySeries& series, size_t train_len);

// Inverse transform for a prediction/target block [L x N x d_x].
Tensor denormalize(const CitySeries& series, const Tensor& block);

// Stride-1 windows per split for all cities (per agent in trajectory mode).
struct SplitWindows {
  WindowIndex train, val, test;
};
SplitWindows build_windows(const std::vector<CitySeries>& cities, size_t l_h, size_t l_f,
                           const SplitRatios& ratios = {}, bool trajectory = false);

// Per-city uniform sample without replacement of ceil(frac * n_c) windows.
WindowIndex subsample_lowdata(const WindowIndex& index, double frac, uint64_t seed);

// History [L_h x N x d_x] (traffic) or [L_h x 2] (trajectory) and the
// matching future block for one window.
Tensor history_window(const CitySeries& series, const WindowRef& ref, size_t l_h,
                      bool trajectory = false);
Tensor future_window(const CitySeries& series, const WindowRef& ref, size_t l_h, size_t l_f,
                     bool trajectory = false);

struct MultiCityDataset {
  std::vector<CitySeries> cities;
  bool trajectory = false;
  size_t l_h = 12, l_f = 12;
  SplitRatios ratios;
  SplitWindows splits;

  std::vector<size_t> city_nodes() const;
  const Adjacency* adjacency_for(size_t city) const;
};

// Normalizes (traffic mode) and indexes windows.
MultiCityDataset build_dataset(std::vector<CitySeries> cities, size_t l_h, size_t l_f,
                               bool trajectory = false, const SplitRatios& ratios = {});

// ------------------------------------------------------------ synthetic data

struct SyntheticSpec {
  size_t num_cities = 2;
  size_t n_nodes = 20;
  size_t t_len = 2000;
  size_t n_motifs = 3;
  size_t period = 96;          // steps per synthetic day
  double base_level = 50.0;    // speed-like offset
  double motif_scale = 8.0;
  double city_amp = 2.0;       // city-specific low-frequency amplitude
  double noise_std = 1.0;
  double diffusion = 0.3;      // graph smoothing strength in [0,1]
  double weight_spread = 0.5;  // city-to-city motif weight variation
  double kernel_sigma = 0.4;   // graph: Gaussian kernel on node coordinates
  double kernel_threshold = 0.5;
  uint64_t seed = 0;

  void validate() const;
};

// Everything needed to audit the generator output, persisted as a sidecar.
struct SyntheticGroundTruth {
  std::vector<double> motif_phase;    // [S]
  std::vector<double> motif_morning;  // [S] rush-hour bump amplitudes
  std::vector<double> motif_evening;  // [S]
  std::vector<std::vector<double>> weights;   // [city][S]
  std::vector<std::vector<double>> loadings;  // [S][node]
  size_t period = 0;
};

// Shared motif value at step t (before node loading / city weighting).
double synthetic_motif(const SyntheticGroundTruth& gt, size_t s, size_t t);

std::pair<std::vector<CitySeries>, SyntheticGroundTruth> generate_synthetic(
    const SyntheticSpec& spec);

struct TrajectorySpec {
  size_t num_cities = 2;
  size_t num_agents = 40;  // per city
  size_t t_len = 60;       // steps per agent track
  double dt = 0.4;         // seconds per step
  double speed_min = 3.0, speed_max = 12.0;  // meters per second
  double turn_prob = 0.04;                   // per step inside the crossing box
  uint64_t seed = 0;

  void validate() const;
};

std::vector<CitySeries> generate_synthetic_trajectories(const TrajectorySpec& spec);

// ------------------------------------------------------------------ CSV I/O

// header: timestamp,<node>,...; missing cells forward- then back-filled.
CitySeries load_csv(const std::string& path);
Adjacency load_adjacency_csv(const std::string& path);
void export_csv(const CitySeries& series, const std::string& path);
void export_adjacency_csv(const Adjacency& adj, const std::string& path);

// -------------------------------------------------------- dataset references

// A dataset reference fully determines the data:
//   "synthetic"                   traffic generator, default spec
//   "synthetic:t_len=400,seed=7"  generator field overrides
//   "trajectory[:key=value,...]"  trajectory generator
//   anything else                 directory of city<k>.csv (+ city<k>_adj.csv)
bool ref_is_synthetic(const std::string& ref);
bool ref_is_trajectory(const std::string& ref);
SyntheticSpec synthetic_spec_from_ref(const std::string& ref);
TrajectorySpec trajectory_spec_from_ref(const std::string& ref);

// city*.csv in lexicographic order; city<k>_adj.csv picked up when present.
std::vector<CitySeries> load_city_dir(const std::string& dir);

MultiCityDataset dataset_from_ref(const std::string& ref, size_t l_h, size_t l_f,
                                  const SplitRatios& ratios = {});

}  // namespace citycond
