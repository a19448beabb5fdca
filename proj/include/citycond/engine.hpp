#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "citycond/backbones.hpp"
#include "citycond/data.hpp"
#include "citycond/errors.hpp"

namespace citycond {

// ------------------------------------------------------------------ optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. step() consumes the
// gradients currently stored on the parameters and throws RunError (naming
// the parameter) if any gradient is non-finite.
class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg = {});

  void step();
  void zero_grad();
  size_t steps_taken() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  size_t t_ = 0;
};

// ------------------------------------------------------------------- metrics

// Element-mean metrics; shapes must match exactly.
double metric_mse(const Tensor& pred, const Tensor& target);
double metric_mae(const Tensor& pred, const Tensor& target);

struct TrafficEval {
  double mse = 0.0, mae = 0.0;            // denormalized units
  double mse_norm = 0.0, mae_norm = 0.0;  // z-score units
  size_t windows = 0;
};

struct TrajectoryEval {
  double ade = 0.0, fde = 0.0;  // meters
  size_t windows = 0;
};

// Mean error over every (window, horizon step, node, feature) of a split.
// Predictions and targets are denormalized with the per-city train stats
// before the primary metrics; normalized variants are reported alongside.
TrafficEval evaluate_traffic(Model& model, const MultiCityDataset& ds, const WindowIndex& split,
                             std::vector<AttentionRecord>* attention = nullptr);

TrajectoryEval evaluate_trajectory(Model& model, const MultiCityDataset& ds,
                                   const WindowIndex& split);

// -------------------------------------------------------------- experiments

enum class Regime { full, lowdata, crosscity };
std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct RegimeConfig {
  Regime kind = Regime::full;
  double fraction = 1.0;    // lowdata: share of training windows kept
  size_t source_city = 0;   // crosscity
  size_t target_city = 1;
  size_t adapt_steps = 200;
  size_t shot_count = 100;
  size_t eval_every = 20;
};

struct ExperimentConfig {
  BackboneSpec spec;
  CityCondConfig citycond;
  RegimeConfig regime;
  uint64_t seed = 42;
  double lr = 1e-3;
  size_t batch = 32;
  size_t max_epochs = 100;
  size_t patience = 10;
  size_t l_h = 12, l_f = 12;
  std::string dataset = "synthetic";

  void validate() const;
  ModelConfig model_config(const MultiCityDataset& ds) const;
};

struct RunResult {
  int schema_version = 1;
  std::string config_hash;  // identical across seeds of one config
  std::string backbone, variant, regime, dataset;
  double fraction = 1.0;
  uint64_t seed = 0;

  size_t epochs = 0;
  double train_loss = 0.0;  // last epoch mean batch loss (normalized)
  double val_mse = 0.0;     // best validation loss, normalized
  bool trajectory = false;  // ade/fde are the meaningful metrics
  bool diverged = false;
  bool failed = false;
  std::string error;

  double mse = 0.0, mae = 0.0;            // test split, denormalized
  double mse_norm = 0.0, mae_norm = 0.0;  // test split, z-score units
  double ade = 0.0, fde = 0.0;            // trajectory runs

  std::string train_city, test_city;  // crosscity
  double pre = 0.0, post = 0.0;       // target-city metric before/after adaptation
  std::vector<std::pair<size_t, double>> curve;  // (adaptation step, target metric)
};

// --------------------------------------------------------------- train loop

struct TrainOptions {
  double lr = 1e-3;
  size_t batch = 32;
  size_t max_epochs = 100;
  size_t patience = 10;  // 0 stops after the first epoch
  double divergence_threshold = 1e6;
};

struct TrainOutcome {
  size_t epochs = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> train_history;  // mean batch loss per epoch
  std::vector<double> val_history;
  bool diverged = false;
};

// City-homogeneous batches: windows are shuffled within each city, then
// batches are dealt round-robin across cities until all are exhausted.
std::vector<std::vector<WindowRef>> make_batches(const WindowIndex& index, size_t batch, Rng& rng);

// Squared-error training loss for one window (normalized units for traffic,
// meters for trajectories); kept on the tape for backward().
Tensor window_loss(Model& model, const MultiCityDataset& ds, const WindowRef& ref);

// Minimizes mean window loss with Adam; early stopping on validation loss
// with best-checkpoint restore. Validation above the divergence threshold
// flags the outcome and stops. Deterministic given (options, rng state).
TrainOutcome train_model(Model& model, const MultiCityDataset& ds, const WindowIndex& train_split,
                         const WindowIndex& val_split, const TrainOptions& opt, Rng rng);

// ---------------------------------------------------------------- regimes

// Full or low-data regime: train, restore best, evaluate on the test split.
// When `trained` is given it receives the final model (for weight export).
RunResult run_experiment(const ExperimentConfig& cfg, const MultiCityDataset& ds,
                         std::unique_ptr<Model>* trained = nullptr);

// Cross-city few-shot: train on the source city, seed the target embedding
// row with the mean of trained rows, evaluate Pre, adapt every parameter on
// shot_count target windows, evaluate Post and an adaptation curve.
RunResult run_crosscity(const ExperimentConfig& cfg, const MultiCityDataset& ds,
                        std::unique_ptr<Model>* trained = nullptr);

// Overwrites the embedding row of a city unseen in training with the mean of
// the trained cities' rows. No-op for models without a city embedding.
void seed_city_embedding(Model& model, size_t target, const std::vector<size_t>& trained);

// Full grid, one result per (backbone, variant, seed); failures are caught
// and recorded as failed results instead of aborting the sweep.
std::vector<RunResult> run_matrix(const ExperimentConfig& base,
                                  const std::vector<BackboneKind>& backbones,
                                  const std::vector<Variant>& variants,
                                  const std::vector<uint64_t>& seeds, const MultiCityDataset& ds);

// Per-slot attention records over a split (citymem models only).
std::vector<AttentionRecord> collect_attention(Model& model, const MultiCityDataset& ds,
                                               const WindowIndex& split);

}  // namespace citycond
