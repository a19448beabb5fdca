// command-line front end: datasets and experiments in, NDJSON records and
// tables out. All randomness flows from config seeds; nothing here consults
// the clock or the environment.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "citycond/data.hpp"
#include "citycond/engine.hpp"
#include "citycond/report.hpp"
#include "citycond/serde.hpp"

namespace {

using namespace citycond;

// ------------------------------------------------------------ shared flags

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  std::string backbone, variant;
  double frac = 0.0;
  uint64_t seed = 0;
  CLI::Option* frac_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void add_config_options(CLI::App* sub, ConfigArgs& a) {
  sub->add_option("--config", a.path, "experiment config JSON file");
  sub->add_option("--set", a.sets,
                  "config override key=value, dots for nesting (repeatable)");
  sub->add_option("--backbone", a.backbone,
                  "backbone kind; resets layers/kernel/dilations to that kind's defaults");
  sub->add_option("--variant", a.variant, "base | cityid | citymem");
  a.frac_opt = sub->add_option("--frac", a.frac,
                               "training-window fraction; promotes a full regime to lowdata");
  a.seed_opt = sub->add_option("--seed", a.seed, "run seed");
}

// defaults -> config file -> --set overrides -> dedicated flags, then validate
ExperimentConfig make_config(const ConfigArgs& a) {
  ExperimentConfig cfg;
  if (!a.path.empty()) cfg = load_config(a.path);
  for (const auto& s : a.sets) cfg = apply_override(cfg, s);
  if (!a.backbone.empty()) {
    BackboneSpec old = cfg.spec;
    cfg.spec = BackboneSpec::defaults(backbone_from_string(a.backbone));
    cfg.spec.d_h = old.d_h;
    cfg.spec.head_hidden = old.head_hidden;
  }
  if (!a.variant.empty()) cfg.citycond.variant = variant_from_string(a.variant);
  if (a.frac_opt && a.frac_opt->count()) {
    cfg.regime.fraction = a.frac;
    if (cfg.regime.kind == Regime::full) cfg.regime.kind = Regime::lowdata;
  }
  if (a.seed_opt && a.seed_opt->count()) cfg.seed = a.seed;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out);
  if (!f) throw DataError("cannot write '" + out + "'");
  f << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

uint64_t parse_seed(const std::string& s) {
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("bad seed '" + s + "'");
  }
  return v;
}

std::string run_summary(const RunResult& r) {
  std::ostringstream os;
  os << r.backbone << "/" << r.variant << " regime=" << r.regime << " seed=" << r.seed
     << " hash=" << r.config_hash;
  if (r.failed) {
    os << " FAILED: " << r.error;
    return os.str();
  }
  char buf[64];
  auto num = [&](const char* k, double v) {
    std::snprintf(buf, sizeof(buf), " %s=%.6g", k, v);
    os << buf;
  };
  os << " epochs=" << r.epochs;
  if (r.regime == "crosscity") {
    num("pre", r.pre);
    num("post", r.post);
  } else if (r.trajectory) {
    num("ade", r.ade);
    num("fde", r.fde);
  } else {
    num("val_mse", r.val_mse);
    num("mse", r.mse);
    num("mae", r.mae);
  }
  if (r.diverged) os << " diverged";
  return os.str();
}

// ------------------------------------------------------------- subcommands

void write_trajectory_csv(const CitySeries& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "timestamp";
  for (size_t a = 0; a < s.n_nodes(); ++a) out << ",a" << a << "_x,a" << a << "_y";
  out << "\n";
  char buf[32];
  const auto& vals = s.values.data();
  size_t cols = s.n_nodes() * 2;
  for (size_t t = 0; t < s.t_len(); ++t) {
    out << t;
    for (size_t i = 0; i < cols; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", vals[t * cols + i]);
      out << ',' << buf;
    }
    out << "\n";
  }
}

void make_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

void cmd_generate(const std::string& ref, const CLI::Option* seed_opt, uint64_t seed,
                  const std::string& out_dir) {
  if (ref_is_trajectory(ref)) {
    TrajectorySpec spec = trajectory_spec_from_ref(ref);
    if (seed_opt->count()) spec.seed = seed;
    auto cities = generate_synthetic_trajectories(spec);
    make_output_dir(out_dir);
    for (const auto& c : cities) {
      write_trajectory_csv(c, out_dir + "/" + c.name + "_traj.csv");
    }
    std::cout << "wrote " << cities.size() << " trajectory CSVs to " << out_dir << "\n";
    return;
  }
  if (!ref_is_synthetic(ref)) {
    throw ConfigError("generate-data needs a 'synthetic' or 'trajectory' dataset reference");
  }
  SyntheticSpec spec = synthetic_spec_from_ref(ref);
  if (seed_opt->count()) spec.seed = seed;
  auto generated = generate_synthetic(spec);
  make_output_dir(out_dir);
  for (const auto& c : generated.first) {
    export_csv(c, out_dir + "/" + c.name + ".csv");
    if (c.adjacency) export_adjacency_csv(*c.adjacency, out_dir + "/" + c.name + "_adj.csv");
  }
  save_ground_truth(generated.second, out_dir + "/ground_truth.json");
  std::cout << "wrote " << generated.first.size() << " city CSVs and ground_truth.json to "
            << out_dir << "\n";
}

void cmd_train(const ExperimentConfig& cfg, const std::string& out, const std::string& weights,
               const std::string& attention) {
  if (cfg.regime.kind == Regime::crosscity) {
    throw ConfigError("train handles full/lowdata regimes; use the transfer subcommand");
  }
  if (!attention.empty() && cfg.citycond.variant != Variant::citymem) {
    throw ConfigError("attention capture requires the citymem variant");
  }
  MultiCityDataset ds = dataset_from_ref(cfg.dataset, cfg.l_h, cfg.l_f);
  std::unique_ptr<Model> model;
  RunResult r = run_experiment(cfg, ds, &model);
  append_results(out, {r});
  if (!weights.empty()) save_weights(*model, weights);
  if (!attention.empty()) save_attention(attention, collect_attention(*model, ds, ds.splits.test));
  std::cout << run_summary(r) << "\n";
}

void cmd_evaluate(const ExperimentConfig& cfg, const std::string& weights_path,
                  const std::string& split_name, const std::string& out,
                  const std::string& attention) {
  if (!attention.empty() && cfg.citycond.variant != Variant::citymem) {
    throw ConfigError("attention capture requires the citymem variant");
  }
  MultiCityDataset ds = dataset_from_ref(cfg.dataset, cfg.l_h, cfg.l_f);
  const WindowIndex* split = nullptr;
  if (split_name == "train") split = &ds.splits.train;
  else if (split_name == "val") split = &ds.splits.val;
  else if (split_name == "test") split = &ds.splits.test;
  else throw ConfigError("unknown split '" + split_name + "'");

  ModelConfig mc = cfg.model_config(ds);
  Rng rng(cfg.seed);
  auto model = build_model(mc, rng);
  load_weights(*model, weights_path);

  RunResult r;
  r.config_hash = config_hash(cfg);
  r.backbone = to_string(cfg.spec.kind);
  r.variant = to_string(cfg.citycond.variant);
  r.regime = to_string(cfg.regime.kind);
  r.dataset = cfg.dataset;
  r.fraction = cfg.regime.kind == Regime::lowdata ? cfg.regime.fraction : 1.0;
  r.seed = cfg.seed;
  r.trajectory = ds.trajectory;
  if (ds.trajectory) {
    TrajectoryEval e = evaluate_trajectory(*model, ds, *split);
    r.ade = e.ade;
    r.fde = e.fde;
  } else {
    TrafficEval e = evaluate_traffic(*model, ds, *split);
    r.mse = e.mse;
    r.mae = e.mae;
    r.mse_norm = e.mse_norm;
    r.mae_norm = e.mae_norm;
  }
  if (!out.empty()) append_results(out, {r});
  if (!attention.empty()) save_attention(attention, collect_attention(*model, ds, *split));
  std::cout << run_summary(r) << "\n";
}

void cmd_transfer(const ExperimentConfig& cfg, const std::string& out,
                  const std::string& weights) {
  if (cfg.regime.kind != Regime::crosscity) {
    throw ConfigError("transfer requires regime.kind = crosscity");
  }
  MultiCityDataset ds = dataset_from_ref(cfg.dataset, cfg.l_h, cfg.l_f);
  std::unique_ptr<Model> model;
  RunResult r = run_crosscity(cfg, ds, &model);
  append_results(out, {r});
  if (!weights.empty()) save_weights(*model, weights);
  std::cout << run_summary(r) << "\n";
}

void cmd_matrix(const ExperimentConfig& base, const std::string& backbones,
                const std::string& variants, const std::string& seeds, const std::string& out) {
  std::vector<BackboneKind> kinds;
  for (const auto& b : split_list(backbones)) kinds.push_back(backbone_from_string(b));
  std::vector<Variant> vars;
  for (const auto& v : split_list(variants)) vars.push_back(variant_from_string(v));
  std::vector<uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) seed_list.push_back(parse_seed(s));

  MultiCityDataset ds = dataset_from_ref(base.dataset, base.l_h, base.l_f);
  auto results = run_matrix(base, kinds, vars, seed_list, ds);
  append_results(out, results);
  size_t failed = 0;
  for (const auto& r : results) {
    if (r.failed) ++failed;
    std::cout << run_summary(r) << "\n";
  }
  std::cout << results.size() << " records (" << failed << " failed) appended to " << out << "\n";
}

void cmd_aggregate(const std::string& results_path, const std::string& format,
                   const std::string& out) {
  auto rows = aggregate(load_results(results_path));
  write_text(render_aggregate(rows, report_format_from_string(format)), out);
}

void cmd_report(const std::string& results_path, const std::string& attention_path,
                const std::string& table, const std::string& format, size_t period,
                size_t buckets, const std::string& out) {
  if (results_path.empty() == attention_path.empty()) {
    throw ConfigError("report needs exactly one of --results or --attention");
  }
  if (!attention_path.empty()) {
    auto rows = attention_report(load_attention(attention_path), period, buckets);
    write_text(render_attention(rows, report_format_from_string(format)), out);
    return;
  }
  auto results = load_results(results_path);
  if (table == "curves") {
    write_text(render_adaptation_curves(results), out);
    return;
  }
  auto rows = aggregate(results);
  if (table == "summary") {
    write_text(render_aggregate(rows, report_format_from_string(format)), out);
  } else if (table == "variants") {
    write_text(render_variant_table(rows), out);
  } else if (table == "transfer") {
    write_text(render_transfer_table(rows), out);
  } else if (table == "lowdata") {
    write_text(render_lowdata_points(rows), out);
  } else {
    throw ConfigError("unknown table '" + table + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"city-conditioned spatio-temporal forecasting lab"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-data", "materialize a synthetic dataset as CSV files");
  std::string gen_ref = "synthetic", gen_out;
  uint64_t gen_seed = 0;
  gen->add_option("--dataset", gen_ref, "synthetic[:k=v,...] or trajectory[:k=v,...]");
  CLI::Option* gen_seed_opt = gen->add_option("--seed", gen_seed, "generator seed override");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one model and append its result record");
  ConfigArgs train_args;
  add_config_options(train, train_args);
  std::string train_out, train_weights, train_attention;
  train->add_option("--out", train_out, "results NDJSON, appended")->required();
  train->add_option("--save-weights", train_weights, "write trained weights JSON");
  train->add_option("--attention", train_attention, "write test-split attention NDJSON (citymem)");

  auto* eval = app.add_subcommand("evaluate", "evaluate saved weights on one split");
  ConfigArgs eval_args;
  add_config_options(eval, eval_args);
  std::string eval_weights, eval_split = "test", eval_out, eval_attention;
  eval->add_option("--weights", eval_weights, "weights JSON from --save-weights")->required();
  eval->add_option("--split", eval_split, "train | val | test");
  eval->add_option("--out", eval_out, "append a result record here");
  eval->add_option("--attention", eval_attention, "write attention NDJSON (citymem)");

  auto* transfer = app.add_subcommand("transfer", "cross-city pretrain plus few-shot adaptation");
  ConfigArgs transfer_args;
  add_config_options(transfer, transfer_args);
  std::string transfer_out, transfer_weights;
  transfer->add_option("--out", transfer_out, "results NDJSON, appended")->required();
  transfer->add_option("--save-weights", transfer_weights, "write adapted weights JSON");

  auto* matrix = app.add_subcommand("matrix", "sweep backbones x variants x seeds");
  ConfigArgs matrix_args;
  add_config_options(matrix, matrix_args);
  std::string matrix_backbones, matrix_variants, matrix_seeds, matrix_out;
  matrix->add_option("--backbones", matrix_backbones, "comma list, e.g. gru,transformer")
      ->required();
  matrix->add_option("--variants", matrix_variants, "comma list, e.g. base,citymem")->required();
  matrix->add_option("--seeds", matrix_seeds, "comma list, e.g. 13,21,42")->required();
  matrix->add_option("--out", matrix_out, "results NDJSON, appended")->required();

  auto* agg = app.add_subcommand("aggregate", "group result records by config and summarize");
  std::string agg_results, agg_format = "text", agg_out;
  agg->add_option("--results", agg_results, "results NDJSON")->required();
  agg->add_option("--format", agg_format, "text | csv | structured");
  agg->add_option("--out", agg_out, "output file, default stdout");

  auto* rep = app.add_subcommand("report", "render tables and plot feeds from saved records");
  std::string rep_results, rep_attention, rep_table = "summary", rep_format = "text", rep_out;
  size_t rep_period = 96, rep_buckets = 24;
  rep->add_option("--results", rep_results, "results NDJSON");
  rep->add_option("--attention", rep_attention, "attention NDJSON");
  rep->add_option("--table", rep_table, "summary | variants | transfer | lowdata | curves");
  rep->add_option("--format", rep_format, "text | csv | structured (summary and attention)");
  rep->add_option("--period", rep_period, "steps per synthetic day, for attention buckets");
  rep->add_option("--buckets", rep_buckets, "time-of-day buckets");
  rep->add_option("--out", rep_out, "output file, default stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems are config errors
  }

  try {
    if (app.got_subcommand(gen)) {
      cmd_generate(gen_ref, gen_seed_opt, gen_seed, gen_out);
    } else if (app.got_subcommand(train)) {
      cmd_train(make_config(train_args), train_out, train_weights, train_attention);
    } else if (app.got_subcommand(eval)) {
      cmd_evaluate(make_config(eval_args), eval_weights, eval_split, eval_out, eval_attention);
    } else if (app.got_subcommand(transfer)) {
      cmd_transfer(make_config(transfer_args), transfer_out, transfer_weights);
    } else if (app.got_subcommand(matrix)) {
      cmd_matrix(make_config(matrix_args), matrix_backbones, matrix_variants, matrix_seeds,
                 matrix_out);
    } else if (app.got_subcommand(agg)) {
      cmd_aggregate(agg_results, agg_format, agg_out);
    } else if (app.got_subcommand(rep)) {
      cmd_report(rep_results, rep_attention, rep_table, rep_format, rep_period, rep_buckets,
                 rep_out);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const RunError& e) {
    std::cerr << "run error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
