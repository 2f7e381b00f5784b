#pragma once

// Grids of training runs: the five-mode ablation and one-parameter sweeps.
// Cells are independent and may run on several threads; results are always
// reported in grid order.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ecn/datagen.hpp"
#include "ecn/evalkit.hpp"
#include "ecn/trainer.hpp"

namespace ecn {

struct CellResult {
  TrainConfig config;
  bool ok = false;
  std::string error;
  double map = 0.0;
  double cmc1 = 0.0;
  double cmc5 = 0.0;
};

/// Trains one configuration and evaluates it on the query/gallery split.
inline CellResult run_cell(const TrainConfig& cfg, const DatasetBundle& bundle) {
  CellResult r;
  r.config = cfg;
  try {
    const TrainResult trained = train(cfg, TrainInputs::from(bundle));
    const EvalResult e = evaluate(trained.net, bundle.target_query, bundle.target_gallery);
    r.map = e.map;
    r.cmc1 = e.cmc_at(1);
    r.cmc5 = e.cmc_at(5);
    r.ok = true;
  } catch (const std::exception& ex) {
    r.error = ex.what();
  }
  return r;
}

/// Runs every config, `jobs` at a time. Failed cells are marked, not thrown.
inline std::vector<CellResult> run_cells(const std::vector<TrainConfig>& configs, const DatasetBundle& bundle,
                                         std::size_t jobs = 1) {
  std::vector<CellResult> results(configs.size());
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(configs.size(), 1));
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) results[i] = run_cell(configs[i], bundle);
  };
  if (jobs == 1) {
    worker();
    return results;
  }
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return results;
}

/// Mode-major grid: every mode in table order, seeds base.seed .. base.seed + n_seeds - 1.
inline std::vector<TrainConfig> ablation_grid(const TrainConfig& base, std::size_t n_seeds,
                                              std::span<const Mode> modes = kAllModes) {
  std::vector<TrainConfig> grid;
  for (Mode m : modes) {
    for (std::size_t s = 0; s < n_seeds; ++s) {
      TrainConfig c = base;
      c.mode = m;
      c.seed = base.seed + s;
      grid.push_back(c);
    }
  }
  return grid;
}

enum class SweepParam { beta, lambda, k };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "beta") return SweepParam::beta;
  if (s == "lambda") return SweepParam::lambda;
  if (s == "k") return SweepParam::k;
  throw ConfigError("unknown sweep parameter '" + s + "' (expected beta, lambda or k)");
}

inline std::vector<TrainConfig> sweep_grid(const TrainConfig& base, SweepParam param, std::span<const double> values) {
  std::vector<TrainConfig> grid;
  for (double v : values) {
    TrainConfig c = base;
    switch (param) {
      case SweepParam::beta: c.beta = v; break;
      case SweepParam::lambda: c.lambda = v; break;
      case SweepParam::k:
        if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
          throw ConfigError("sweep: k values must be positive integers");
        }
        c.k = static_cast<std::size_t>(v);
        break;
    }
    c.validate();
    grid.push_back(c);
  }
  return grid;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ModeSummary {
  Mode mode = Mode::source_only;
  std::size_t n_ok = 0;
  std::size_t n_failed = 0;
  double map = 0.0;
  double cmc1 = 0.0;
  double cmc5 = 0.0;
};

/// Per-mode medians over successful cells, in table row order.
inline std::vector<ModeSummary> summarize_ablation(std::span<const CellResult> cells) {
  std::vector<ModeSummary> out;
  for (Mode m : kAllModes) {
    ModeSummary s;
    s.mode = m;
    std::vector<double> maps, r1, r5;
    bool present = false;
    for (const auto& c : cells) {
      if (c.config.mode != m) continue;
      present = true;
      if (!c.ok) {
        ++s.n_failed;
        continue;
      }
      ++s.n_ok;
      maps.push_back(c.map);
      r1.push_back(c.cmc1);
      r5.push_back(c.cmc5);
    }
    if (!present) continue;
    s.map = median(maps);
    s.cmc1 = median(r1);
    s.cmc5 = median(r5);
    out.push_back(s);
  }
  return out;
}

inline std::string ablation_csv(std::span<const CellResult> cells) {
  std::ostringstream out;
  out << "mode,seed,map,cmc1,cmc5,status\n";
  for (const auto& c : cells) {
    out << to_string(c.config.mode) << ',' << c.config.seed << ',';
    if (c.ok) {
      out << detail::fmt_double(c.map) << ',' << detail::fmt_double(c.cmc1) << ',' << detail::fmt_double(c.cmc5)
          << ",ok\n";
    } else {
      out << ",,,failed\n";
    }
  }
  return out.str();
}

inline std::string ablation_summary_csv(std::span<const ModeSummary> rows) {
  std::ostringstream out;
  out << "mode,map,cmc1,cmc5,n_ok,n_failed\n";
  for (const auto& r : rows) {
    out << to_string(r.mode) << ',' << detail::fmt_double(r.map) << ',' << detail::fmt_double(r.cmc1) << ','
        << detail::fmt_double(r.cmc5) << ',' << r.n_ok << ',' << r.n_failed << '\n';
  }
  return out.str();
}

inline std::string sweep_csv(std::span<const double> values, std::span<const CellResult> cells) {
  std::ostringstream out;
  out << "value,map,cmc1,status\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out << detail::fmt_double(values[i]) << ',';
    if (cells[i].ok) {
      out << detail::fmt_double(cells[i].map) << ',' << detail::fmt_double(cells[i].cmc1) << ",ok\n";
    } else {
      out << ",,failed\n";
    }
  }
  return out.str();
}

}  // namespace ecn
