#pragma once

// `ecn` command line: gen-data, train, eval, ablate, sweep.
//
// Exit codes: 0 success, 2 input or config error, 3 numeric failure.

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecn/checkpoint.hpp"
#include "ecn/datagen.hpp"
#include "ecn/evalkit.hpp"
#include "ecn/experiment.hpp"
#include "ecn/json_config.hpp"
#include "ecn/trainer.hpp"

namespace ecn::cli {

inline constexpr const char* kVersion = "ecn 0.1.0";
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;

namespace fs = std::filesystem;

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Written to <out>/manifest.json before any long computation starts.
struct RunManifest {
  std::string command;
  std::string config_path;
  Json resolved_config;
  std::uint64_t seed = 0;
  Json inputs = Json::object();
  Json outputs = Json::object();

  Json to_json() const {
    return Json{{"command", command},         {"config_path", config_path}, {"resolved_config", resolved_config},
                {"seed", seed},               {"version", kVersion},        {"prng", kPrngName},
                {"started_at", utc_timestamp()}, {"inputs", inputs},        {"outputs", outputs}};
  }

  void write(const fs::path& out_dir) const {
    fs::create_directories(out_dir);
    write_text_file((out_dir / "manifest.json").string(), to_json().dump(2) + "\n");
  }
};

/// A train config file, or a manifest written by an earlier run (its
/// resolved_config is reused).
inline TrainConfig load_train_config(const std::string& path) {
  if (path.empty()) return {};
  const Json j = load_json_file(path);
  if (j.is_object() && j.contains("resolved_config") && j.contains("command")) {
    return train_config_from_json(j["resolved_config"], path + ": resolved_config");
  }
  return train_config_from_json(j, path);
}

inline GenConfig load_gen_config(const std::string& path) {
  if (path.empty()) return {};
  const Json j = load_json_file(path);
  if (j.is_object() && j.contains("resolved_config") && j.contains("command")) {
    return gen_config_from_json(j["resolved_config"], path + ": resolved_config");
  }
  return gen_config_from_json(j, path);
}

/// --seed wins over ECN_SEED, which wins over the config file.
inline void apply_seed_override(TrainConfig& cfg, const std::optional<std::uint64_t>& flag) {
  if (flag) {
    cfg.seed = *flag;
    return;
  }
  if (const char* env = std::getenv("ECN_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
      cfg.seed = v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("ECN_SEED is not an unsigned integer: ") + env);
    }
  }
}

inline DatasetBundle load_data(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("data directory not found: " + dir);
  return read_dataset(dir);
}

inline std::vector<double> parse_values(const std::string& list) {
  std::vector<double> values;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("--values: not a number: '" + item + "'");
    }
  }
  if (values.empty()) throw ConfigError("--values: empty list");
  return values;
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::string config;
  std::string out;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& log) {
  const GenConfig cfg = load_gen_config(a.config);
  RunManifest m{"gen-data", a.config, to_json(cfg), cfg.seed};
  for (const char* f : {kSourceTrainFile, kTargetTrainFile, kCamstyleFile, kQueryFile, kGalleryFile, kGroundTruthFile,
                        kGenConfigFile}) {
    m.outputs[f] = (fs::path(a.out) / f).string();
  }
  m.write(a.out);
  const DatasetBundle bundle = generate(cfg);
  write_dataset(bundle, a.out);
  log << "wrote " << bundle.source_train.size() << " source, " << bundle.target_train.size() << " target, "
      << bundle.target_camstyle.size() << " camstyle, " << bundle.target_query.size() << " query, "
      << bundle.target_gallery.size() << " gallery samples to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  bool update_with_real = false;
};

inline TrainConfig resolve_train_config(const std::string& config_path, const std::optional<std::string>& mode,
                                        const std::optional<std::uint64_t>& seed, const DatasetBundle& bundle) {
  TrainConfig cfg = load_train_config(config_path);
  if (mode) cfg.mode = parse_mode(*mode);
  apply_seed_override(cfg, seed);
  if (cfg.mode == Mode::source_only) cfg.lambda = 0.0;
  resolve_augment_sigma(cfg, bundle);
  cfg.validate();
  return cfg;
}

inline int cmd_train(const TrainArgs& a, std::ostream& log) {
  const DatasetBundle bundle = load_data(a.data);
  TrainConfig cfg = resolve_train_config(a.config, a.mode, a.seed, bundle);
  if (a.update_with_real) cfg.update_with_real = true;

  const fs::path out(a.out);
  RunManifest m{"train", a.config, to_json(cfg), cfg.seed};
  m.inputs["data"] = a.data;
  m.outputs["metrics"] = (out / "metrics.csv").string();
  m.outputs["timing"] = (out / "timing.csv").string();
  m.outputs["checkpoint"] = (out / "checkpoint.json").string();
  m.write(out);

  // Periodic evaluation only when the labeled files are around; the trainer
  // itself only ever receives the unlabeled target view.
  EvalHook hook;
  if (bundle.ground_truth && !bundle.target_query.empty() && !bundle.target_gallery.empty()) {
    hook = [&bundle](const EmbeddingNet& net) { return evaluate(net, bundle.target_query, bundle.target_gallery); };
  }
  const TrainResult r = train(cfg, TrainInputs::from(bundle), hook);

  write_text_file((out / "metrics.csv").string(), metrics_csv(r.logs));
  write_text_file((out / "timing.csv").string(), timing_csv(r.logs));
  save_checkpoint(Checkpoint{cfg, r.epochs_completed, r.net, r.memory}, (out / "checkpoint.json").string());
  log << "trained " << r.epochs_completed << " epochs (mode " << to_string(cfg.mode) << ", seed " << cfg.seed << ")";
  if (!r.logs.empty() && r.logs.back().map) log << ", final mAP " << *r.logs.back().map;
  log << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& log) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const DatasetBundle bundle = load_data(a.data);
  if (bundle.obs_dim() != ckpt.net.input_dim()) {
    throw ConfigError("checkpoint expects obs_dim " + std::to_string(ckpt.net.input_dim()) + " but data has " +
                      std::to_string(bundle.obs_dim()));
  }
  if (bundle.target_query.empty() || bundle.target_gallery.empty()) {
    throw ConfigError("data directory has no query/gallery samples");
  }
  const fs::path out(a.out);
  RunManifest m{"eval", a.checkpoint, to_json(ckpt.config), ckpt.config.seed};
  m.inputs["checkpoint"] = a.checkpoint;
  m.inputs["data"] = a.data;
  m.outputs["eval_json"] = (out / "eval.json").string();
  m.outputs["eval_csv"] = (out / "eval.csv").string();
  m.write(out);

  const EvalResult r = evaluate(ckpt.net, bundle.target_query, bundle.target_gallery);
  write_text_file((out / "eval.json").string(), to_json(r).dump(2) + "\n");
  std::ostringstream csv;
  csv << "rank,value\n";
  for (std::size_t i = 0; i < r.cmc.size(); ++i) csv << (i + 1) << ',' << detail::fmt_double(r.cmc[i]) << '\n';
  write_text_file((out / "eval.csv").string(), csv.str());
  log << "mAP " << r.map << ", rank-1 " << r.cmc_at(1) << " over " << r.n_queries << " queries (" << r.skipped
      << " skipped)\n";
  return kExitOk;
}

struct AblateArgs {
  std::string config;
  std::string data;
  std::string out;
  std::size_t seeds = 5;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& log) {
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  const DatasetBundle bundle = load_data(a.data);
  const TrainConfig base = resolve_train_config(a.config, std::nullopt, a.seed, bundle);
  const fs::path out(a.out);
  RunManifest m{"ablate", a.config, to_json(base), base.seed};
  m.inputs["data"] = a.data;
  m.inputs["seeds"] = a.seeds;
  m.outputs["ablation"] = (out / "ablation.csv").string();
  m.outputs["summary"] = (out / "ablation_summary.csv").string();
  m.write(out);

  auto grid = ablation_grid(base, a.seeds);
  for (auto& c : grid) {
    if (c.mode == Mode::source_only) c.lambda = 0.0;
  }
  const auto cells = run_cells(grid, bundle, a.jobs);
  const auto summary = summarize_ablation(cells);
  write_text_file((out / "ablation.csv").string(), ablation_csv(cells));
  write_text_file((out / "ablation_summary.csv").string(), ablation_summary_csv(summary));
  for (const auto& c : cells) {
    if (!c.ok) log << "cell " << to_string(c.config.mode) << " seed " << c.config.seed << " failed: " << c.error << "\n";
  }
  for (const auto& s : summary) {
    log << to_string(s.mode) << ": median mAP " << s.map << ", rank-1 " << s.cmc1 << " (" << s.n_ok << " ok)\n";
  }
  return kExitOk;
}

struct SweepArgs {
  std::string param;
  std::string values;
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

inline int cmd_sweep(const SweepArgs& a, std::ostream& log) {
  const SweepParam param = parse_sweep_param(a.param);
  const std::vector<double> values = parse_values(a.values);
  const DatasetBundle bundle = load_data(a.data);
  const TrainConfig base = resolve_train_config(a.config, a.mode, a.seed, bundle);
  const auto grid = sweep_grid(base, param, values);
  const fs::path out(a.out);
  RunManifest m{"sweep", a.config, to_json(base), base.seed};
  m.inputs["data"] = a.data;
  m.inputs["param"] = a.param;
  m.inputs["values"] = values;
  m.outputs["sweep"] = (out / "sweep.csv").string();
  m.write(out);

  const auto cells = run_cells(grid, bundle, a.jobs);
  write_text_file((out / "sweep.csv").string(), sweep_csv(values, cells));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    log << a.param << "=" << values[i] << ": ";
    if (cells[i].ok) {
      log << "mAP " << cells[i].map << ", rank-1 " << cells[i].cmc1 << "\n";
    } else {
      log << "failed: " << cells[i].error << "\n";
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

/// Parses and dispatches; never throws.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Exemplar-memory invariance learning for unsupervised domain adaptation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic two-domain dataset");
  gen_cmd->add_option("--config", gen.config, "GenConfig JSON (defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a dataset directory");
  train_cmd->add_option("--config", tr.config, "TrainConfig JSON or a previous run's manifest.json");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--mode", tr.mode, "source_only | E | E+C | E+N | E+C+N");
  train_cmd->add_option("--seed", tr.seed, "Overrides the config seed and ECN_SEED");
  train_cmd->add_flag("--update-with-real", tr.update_with_real,
                      "Write the real image's feature into memory even when a transfer was forwarded");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the query/gallery split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint.json")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run all five modes over several seeds");
  ablate_cmd->add_option("--config", ab.config, "TrainConfig JSON");
  ablate_cmd->add_option("--data", ab.data, "Dataset directory")->required();
  ablate_cmd->add_option("--out", ab.out, "Output directory")->required();
  ablate_cmd->add_option("--seeds", ab.seeds, "Seeds per mode")->capture_default_str();
  ablate_cmd->add_option("--seed", ab.seed, "First seed");
  ablate_cmd->add_option("--jobs", ab.jobs, "Cells trained in parallel")->capture_default_str();

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Vary one hyper-parameter");
  sweep_cmd->add_option("--param", sw.param, "beta | lambda | k")->required();
  sweep_cmd->add_option("--values", sw.values, "Comma-separated values")->required();
  sweep_cmd->add_option("--config", sw.config, "TrainConfig JSON");
  sweep_cmd->add_option("--data", sw.data, "Dataset directory")->required();
  sweep_cmd->add_option("--out", sw.out, "Output directory")->required();
  sweep_cmd->add_option("--mode", sw.mode, "Mode for every run (default from config)");
  sweep_cmd->add_option("--seed", sw.seed, "Overrides the config seed");
  sweep_cmd->add_option("--jobs", sw.jobs, "Runs trained in parallel")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, log, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, err);
    return kExitInput;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, log);
    if (*train_cmd) return cmd_train(tr, log);
    if (*eval_cmd) return cmd_eval(ev, log);
    if (*ablate_cmd) return cmd_ablate(ab, log);
    if (*sweep_cmd) return cmd_sweep(sw, log);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitInput;
}

inline int run(const std::vector<std::string>& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"ecn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), log, err);
}

}  // namespace ecn::cli
