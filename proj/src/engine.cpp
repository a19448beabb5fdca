#include "citycond/engine.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "citycond/serde.hpp"

namespace citycond {

// ------------------------------------------------------------------ optimizer

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0) throw ConfigError("learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    auto& theta = params_[p].tensor.raw_data();
    const std::vector<double>* g = nullptr;
    if (params_[p].tensor.grad_allocated()) {
      g = &params_[p].tensor.grad();
      for (double gi : *g) {
        if (!std::isfinite(gi)) {
          throw RunError("non-finite gradient in parameter '" + params_[p].name + "'");
        }
      }
    }
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < theta.size(); ++i) {
      double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      theta[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

// ------------------------------------------------------------------- metrics

namespace {

void check_match(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw TensorError("metric shapes differ: " + shape_str(pred.shape()) + " vs " +
                      shape_str(target.shape()));
  }
}

}  // namespace

double metric_mse(const Tensor& pred, const Tensor& target) {
  check_match(pred, target);
  const auto& a = pred.data();
  const auto& b = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double metric_mae(const Tensor& pred, const Tensor& target) {
  check_match(pred, target);
  const auto& a = pred.data();
  const auto& b = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

TrafficEval evaluate_traffic(Model& model, const MultiCityDataset& ds, const WindowIndex& split,
                             std::vector<AttentionRecord>* attention) {
  if (ds.trajectory) throw ConfigError("traffic evaluation on a trajectory dataset");
  if (split.windows.empty()) {
    throw ConfigError("evaluation split '" + split.split + "' has no windows");
  }
  double sq_n = 0.0, ab_n = 0.0, sq_d = 0.0, ab_d = 0.0;
  size_t count = 0;
  TrafficEval out;
  for (const auto& w : split.windows) {
    const CitySeries& s = ds.cities.at(w.city);
    Tensor x = history_window(s, w, ds.l_h);
    Tensor y = future_window(s, w, ds.l_h, ds.l_f);
    Tensor pred = model.forward(w.city, x, ds.adjacency_for(w.city), attention, w.start);
    check_match(pred, y);
    const auto& pv = pred.data();
    const auto& yv = y.data();
    size_t nd = s.n_nodes() * s.d_x();
    for (size_t t = 0; t < ds.l_f; ++t) {
      for (size_t i = 0; i < nd; ++i) {
        double dn = pv[t * nd + i] - yv[t * nd + i];
        sq_n += dn * dn;
        ab_n += std::abs(dn);
        double scale = s.normalized ? s.stats.std[i] : 1.0;
        double dd = dn * scale;  // means cancel in the difference
        sq_d += dd * dd;
        ab_d += std::abs(dd);
        ++count;
      }
    }
    ++out.windows;
  }
  out.mse = sq_d / static_cast<double>(count);
  out.mae = ab_d / static_cast<double>(count);
  out.mse_norm = sq_n / static_cast<double>(count);
  out.mae_norm = ab_n / static_cast<double>(count);
  return out;
}

TrajectoryEval evaluate_trajectory(Model& model, const MultiCityDataset& ds,
                                   const WindowIndex& split) {
  if (!ds.trajectory) throw ConfigError("trajectory evaluation on a traffic dataset");
  if (split.windows.empty()) {
    throw ConfigError("evaluation split '" + split.split + "' has no windows");
  }
  TrajectoryEval out;
  double ade = 0.0, fde = 0.0;
  for (const auto& w : split.windows) {
    const CitySeries& s = ds.cities.at(w.city);
    Tensor x = history_window(s, w, ds.l_h, true);
    Tensor y = future_window(s, w, ds.l_h, ds.l_f, true);
    Tensor pred = model.forward(w.city, x, nullptr, nullptr, w.start);
    check_match(pred, y);
    const auto& pv = pred.data();
    const auto& yv = y.data();
    double mean_d = 0.0, last_d = 0.0;
    for (size_t t = 0; t < ds.l_f; ++t) {
      double dx = pv[t * 2] - yv[t * 2];
      double dy = pv[t * 2 + 1] - yv[t * 2 + 1];
      last_d = std::sqrt(dx * dx + dy * dy);
      mean_d += last_d;
    }
    ade += mean_d / static_cast<double>(ds.l_f);
    fde += last_d;
    ++out.windows;
  }
  out.ade = ade / static_cast<double>(out.windows);
  out.fde = fde / static_cast<double>(out.windows);
  return out;
}

// --------------------------------------------------------------- train loop

std::vector<std::vector<WindowRef>> make_batches(const WindowIndex& index, size_t batch,
                                                 Rng& rng) {
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  std::map<size_t, std::vector<WindowRef>> per_city;
  for (const auto& w : index.windows) per_city[w.city].push_back(w);
  std::vector<std::vector<WindowRef>> pools;
  for (auto& [city, pool] : per_city) {
    for (size_t i = pool.size(); i > 1; --i) {
      size_t j = rng.below(i);
      std::swap(pool[i - 1], pool[j]);
    }
    pools.push_back(std::move(pool));
  }
  std::vector<std::vector<WindowRef>> batches;
  std::vector<size_t> offs(pools.size(), 0);
  bool remaining = true;
  while (remaining) {
    remaining = false;
    for (size_t p = 0; p < pools.size(); ++p) {  // round-robin across cities
      if (offs[p] >= pools[p].size()) continue;
      size_t take = std::min(batch, pools[p].size() - offs[p]);
      batches.emplace_back(pools[p].begin() + static_cast<long>(offs[p]),
                           pools[p].begin() + static_cast<long>(offs[p] + take));
      offs[p] += take;
      remaining = true;
    }
  }
  return batches;
}

Tensor window_loss(Model& model, const MultiCityDataset& ds, const WindowRef& ref) {
  const CitySeries& s = ds.cities.at(ref.city);
  Tensor x = history_window(s, ref, ds.l_h, ds.trajectory);
  Tensor y = future_window(s, ref, ds.l_h, ds.l_f, ds.trajectory);
  Tensor pred = model.forward(ref.city, x, ds.adjacency_for(ref.city));
  Tensor diff = sub(pred, y);
  return mean_all(mul(diff, diff));
}

namespace {

double batch_step(Model& model, const MultiCityDataset& ds, const std::vector<WindowRef>& batch,
                  Adam& adam) {
  adam.zero_grad();
  Tensor acc;
  for (const auto& w : batch) {
    Tensor l = window_loss(model, ds, w);
    acc = acc.defined() ? add(acc, l) : l;
  }
  Tensor loss = mul_scalar(acc, 1.0 / static_cast<double>(batch.size()));
  double value = loss.value();
  if (!std::isfinite(value)) return value;  // caller flags divergence, no step
  backward(loss);
  adam.step();
  return value;
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.data());
  return out;
}

void restore(ParamList& params, const std::vector<std::vector<double>>& snap) {
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.raw_data() = snap[i];
}

double mean_split_loss(Model& model, const MultiCityDataset& ds, const WindowIndex& split) {
  double acc = 0.0;
  for (const auto& w : split.windows) acc += window_loss(model, ds, w).value();
  return acc / static_cast<double>(split.windows.size());
}

}  // namespace

TrainOutcome train_model(Model& model, const MultiCityDataset& ds, const WindowIndex& train_split,
                         const WindowIndex& val_split, const TrainOptions& opt, Rng rng) {
  if (train_split.windows.empty()) throw ConfigError("training split has no windows");
  if (val_split.windows.empty()) throw ConfigError("validation split has no windows");
  if (opt.max_epochs == 0) throw ConfigError("max_epochs must be >= 1");

  ParamList params = model.parameters();
  Adam adam(params, {opt.lr, 0.9, 0.999, 1e-8});
  TrainOutcome out;
  auto best = snapshot(params);  // falls back to the init when nothing improves
  size_t bad = 0;
  for (size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    Rng erng = rng.fork("epoch." + std::to_string(epoch));
    auto batches = make_batches(train_split, opt.batch, erng);
    double epoch_loss = 0.0;
    bool finite = true;
    for (const auto& b : batches) {
      double l = batch_step(model, ds, b, adam);
      if (!std::isfinite(l)) {
        finite = false;
        break;
      }
      epoch_loss += l;
    }
    if (!finite) {
      out.diverged = true;
      out.epochs = epoch;
      break;
    }
    out.train_history.push_back(epoch_loss / static_cast<double>(batches.size()));
    double val = mean_split_loss(model, ds, val_split);
    out.val_history.push_back(val);
    out.epochs = epoch;
    if (!std::isfinite(val) || val > opt.divergence_threshold) {
      out.diverged = true;
      break;
    }
    if (val < out.best_val) {
      out.best_val = val;
      best = snapshot(params);
      bad = 0;
    } else {
      ++bad;
    }
    if (bad >= opt.patience) break;
  }
  restore(params, best);
  return out;
}

// ---------------------------------------------------------------- regimes

std::string to_string(Regime r) {
  switch (r) {
    case Regime::full: return "full";
    case Regime::lowdata: return "lowdata";
    case Regime::crosscity: return "crosscity";
  }
  throw ConfigError("unknown regime");
}

Regime regime_from_string(const std::string& s) {
  if (s == "full") return Regime::full;
  if (s == "lowdata") return Regime::lowdata;
  if (s == "crosscity") return Regime::crosscity;
  throw ConfigError("unknown regime '" + s + "'");
}

void ExperimentConfig::validate() const {
  spec.validate();
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
  if (l_h == 0 || l_f == 0) throw ConfigError("window lengths must be >= 1");
  if (regime.kind == Regime::lowdata && !(regime.fraction > 0.0 && regime.fraction <= 1.0)) {
    throw ConfigError("lowdata fraction must lie in (0, 1]");
  }
  if (regime.kind == Regime::crosscity) {
    if (regime.source_city == regime.target_city) {
      throw ConfigError("crosscity source and target must differ");
    }
    if (regime.eval_every == 0) throw ConfigError("eval_every must be >= 1");
    if (regime.shot_count == 0) throw ConfigError("shot_count must be >= 1");
  }
}

ModelConfig ExperimentConfig::model_config(const MultiCityDataset& ds) const {
  ModelConfig mc;
  mc.spec = spec;
  mc.citycond = citycond;
  mc.citycond.num_cities = ds.cities.size();
  mc.d_x = ds.cities.at(0).d_x();
  mc.l_h = ds.l_h;
  mc.l_f = ds.l_f;
  mc.city_nodes = ds.city_nodes();
  return mc;
}

namespace {

RunResult result_skeleton(const ExperimentConfig& cfg) {
  RunResult r;
  r.config_hash = config_hash(cfg);
  r.backbone = to_string(cfg.spec.kind);
  r.variant = to_string(cfg.citycond.variant);
  r.regime = to_string(cfg.regime.kind);
  r.dataset = cfg.dataset;
  r.fraction = cfg.regime.kind == Regime::lowdata ? cfg.regime.fraction : 1.0;
  r.seed = cfg.seed;
  return r;
}

WindowIndex filter_city(const WindowIndex& index, size_t city) {
  WindowIndex out;
  out.split = index.split;
  for (const auto& w : index.windows)
    if (w.city == city) out.windows.push_back(w);
  return out;
}

void fill_test_metrics(RunResult& r, Model& model, const MultiCityDataset& ds,
                       const WindowIndex& test) {
  r.trajectory = ds.trajectory;
  if (ds.trajectory) {
    TrajectoryEval e = evaluate_trajectory(model, ds, test);
    r.ade = e.ade;
    r.fde = e.fde;
  } else {
    TrafficEval e = evaluate_traffic(model, ds, test);
    r.mse = e.mse;
    r.mae = e.mae;
    r.mse_norm = e.mse_norm;
    r.mae_norm = e.mae_norm;
  }
}

// Target-city headline metric for adaptation curves: denormalized MSE for
// traffic, ADE for trajectories.
double headline_metric(Model& model, const MultiCityDataset& ds, const WindowIndex& split) {
  if (ds.trajectory) return evaluate_trajectory(model, ds, split).ade;
  return evaluate_traffic(model, ds, split).mse;
}

}  // namespace

void seed_city_embedding(Model& model, size_t target, const std::vector<size_t>& trained) {
  Tensor& table = model.citycond.embedding;
  if (!table.defined()) return;  // base variant has no embedding
  if (trained.empty()) throw ConfigError("no trained cities to seed the embedding from");
  size_t d_c = table.dim(1);
  if (target >= table.dim(0)) throw ConfigError("target city outside the embedding table");
  auto& data = table.raw_data();
  for (size_t k = 0; k < d_c; ++k) {
    double acc = 0.0;
    for (size_t c : trained) acc += data[c * d_c + k];
    data[target * d_c + k] = acc / static_cast<double>(trained.size());
  }
}

RunResult run_experiment(const ExperimentConfig& cfg, const MultiCityDataset& ds,
                         std::unique_ptr<Model>* trained) {
  cfg.validate();
  if (cfg.regime.kind == Regime::crosscity) return run_crosscity(cfg, ds, trained);
  if (ds.l_h != cfg.l_h || ds.l_f != cfg.l_f) {
    throw ConfigError("dataset windows do not match the configured l_h/l_f");
  }
  RunResult r = result_skeleton(cfg);
  ModelConfig mc = cfg.model_config(ds);
  Rng rng(cfg.seed);
  auto model = build_model(mc, rng);

  WindowIndex train = ds.splits.train;
  if (cfg.regime.kind == Regime::lowdata) {
    train = subsample_lowdata(train, cfg.regime.fraction, cfg.seed);
  }
  TrainOptions opt{cfg.lr, cfg.batch, cfg.max_epochs, cfg.patience, 1e6};
  TrainOutcome t = train_model(*model, ds, train, ds.splits.val, opt, rng.fork("train"));
  r.epochs = t.epochs;
  r.diverged = t.diverged;
  r.val_mse = t.best_val;
  r.train_loss = t.train_history.empty() ? 0.0 : t.train_history.back();
  fill_test_metrics(r, *model, ds, ds.splits.test);
  if (trained) *trained = std::move(model);
  return r;
}

RunResult run_crosscity(const ExperimentConfig& cfg, const MultiCityDataset& ds,
                        std::unique_ptr<Model>* trained) {
  cfg.validate();
  if (ds.l_h != cfg.l_h || ds.l_f != cfg.l_f) {
    throw ConfigError("dataset windows do not match the configured l_h/l_f");
  }
  size_t src = cfg.regime.source_city, tgt = cfg.regime.target_city;
  if (src >= ds.cities.size() || tgt >= ds.cities.size()) {
    throw ConfigError("crosscity cities out of range for this dataset");
  }
  RunResult r = result_skeleton(cfg);
  r.train_city = ds.cities[src].name;
  r.test_city = ds.cities[tgt].name;

  ModelConfig mc = cfg.model_config(ds);
  Rng rng(cfg.seed);
  auto model = build_model(mc, rng);

  WindowIndex strain = filter_city(ds.splits.train, src);
  WindowIndex sval = filter_city(ds.splits.val, src);
  TrainOptions opt{cfg.lr, cfg.batch, cfg.max_epochs, cfg.patience, 1e6};
  TrainOutcome t = train_model(*model, ds, strain, sval, opt, rng.fork("train"));
  r.epochs = t.epochs;
  r.diverged = t.diverged;
  r.val_mse = t.best_val;
  r.train_loss = t.train_history.empty() ? 0.0 : t.train_history.back();

  seed_city_embedding(*model, tgt, {src});

  WindowIndex ttest = filter_city(ds.splits.test, tgt);
  if (ttest.windows.empty()) throw ConfigError("target city has no test windows");
  r.pre = headline_metric(*model, ds, ttest);
  r.curve.emplace_back(0, r.pre);

  // few-shot pool: shot_count target-city training windows
  WindowIndex pool = filter_city(ds.splits.train, tgt);
  if (pool.windows.size() < cfg.regime.shot_count) {
    throw ConfigError("target city offers " + std::to_string(pool.windows.size()) +
                      " training windows, fewer than shot_count " +
                      std::to_string(cfg.regime.shot_count));
  }
  Rng srng = rng.fork("shots");
  for (size_t i = 0; i < cfg.regime.shot_count; ++i) {
    size_t j = i + srng.below(pool.windows.size() - i);
    std::swap(pool.windows[i], pool.windows[j]);
  }
  pool.windows.resize(cfg.regime.shot_count);

  ParamList params = model->parameters();  // every parameter adapts
  Adam adam(params, {cfg.lr, 0.9, 0.999, 1e-8});
  size_t step = 0, pass = 0;
  while (step < cfg.regime.adapt_steps) {
    Rng arng = rng.fork("adapt." + std::to_string(pass++));
    auto batches = make_batches(pool, cfg.batch, arng);
    for (const auto& b : batches) {
      double l = batch_step(*model, ds, b, adam);
      if (!std::isfinite(l)) {
        r.diverged = true;
        step = cfg.regime.adapt_steps;
        break;
      }
      ++step;
      if (step % cfg.regime.eval_every == 0 || step == cfg.regime.adapt_steps) {
        r.curve.emplace_back(step, headline_metric(*model, ds, ttest));
      }
      if (step == cfg.regime.adapt_steps) break;
    }
  }
  r.post = cfg.regime.adapt_steps == 0 ? headline_metric(*model, ds, ttest) : r.curve.back().second;
  fill_test_metrics(r, *model, ds, ttest);
  if (trained) *trained = std::move(model);
  return r;
}

std::vector<RunResult> run_matrix(const ExperimentConfig& base,
                                  const std::vector<BackboneKind>& backbones,
                                  const std::vector<Variant>& variants,
                                  const std::vector<uint64_t>& seeds,
                                  const MultiCityDataset& ds) {
  if (backbones.empty() || variants.empty() || seeds.empty()) {
    throw ConfigError("matrix needs at least one backbone, variant, and seed");
  }
  std::vector<RunResult> out;
  for (BackboneKind kind : backbones) {
    for (Variant variant : variants) {
      for (uint64_t seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.spec = BackboneSpec::defaults(kind);
        cfg.spec.d_h = base.spec.d_h;
        cfg.spec.head_hidden = base.spec.head_hidden;
        cfg.citycond.variant = variant;
        cfg.seed = seed;
        try {
          out.push_back(run_experiment(cfg, ds));
        } catch (const std::exception& e) {  // isolate failures, keep sweeping
          RunResult r = result_skeleton(cfg);
          r.failed = true;
          r.error = e.what();
          out.push_back(r);
        }
      }
    }
  }
  return out;
}

std::vector<AttentionRecord> collect_attention(Model& model, const MultiCityDataset& ds,
                                               const WindowIndex& split) {
  if (model.cfg.citycond.variant != Variant::citymem) {
    throw ConfigError("attention capture requires the citymem variant");
  }
  std::vector<AttentionRecord> records;
  for (const auto& w : split.windows) {
    const CitySeries& s = ds.cities.at(w.city);
    Tensor x = history_window(s, w, ds.l_h, ds.trajectory);
    model.forward(w.city, x, ds.adjacency_for(w.city), &records, w.start);
  }
  return records;
}

}  // namespace citycond
