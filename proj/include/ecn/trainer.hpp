#pragma once

// Joint training over a labeled source domain and an unlabeled target domain.
// Each iteration forwards a source batch through the classifier head and a
// target batch (each item replaced by a randomly chosen camera-style variant
// when camera invariance is on) against the exemplar memory, takes one SGD
// step on (1 - lambda) L_src + lambda L_tgt, then writes the forwarded target
// features into their memory slots.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ecn/datagen.hpp"
#include "ecn/evalkit.hpp"
#include "ecn/invariance.hpp"
#include "ecn/json_config.hpp"
#include "ecn/memory.hpp"
#include "ecn/model.hpp"
#include "ecn/numerics.hpp"

namespace ecn {

enum class Mode { source_only, E, EC, EN, ECN };

inline constexpr std::array<Mode, 5> kAllModes = {Mode::source_only, Mode::E, Mode::EC, Mode::EN, Mode::ECN};

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::source_only: return "source_only";
    case Mode::E: return "E";
    case Mode::EC: return "E+C";
    case Mode::EN: return "E+N";
    case Mode::ECN: return "E+C+N";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : kAllModes) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + s + "' (expected source_only, E, E+C, E+N or E+C+N)");
}

inline bool uses_camera(Mode m) { return m == Mode::EC || m == Mode::ECN; }
inline bool uses_neighborhood(Mode m) { return m == Mode::EN || m == Mode::ECN; }

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 5;
  std::size_t batch_source = 64;
  std::size_t batch_target = 64;
  double lr = 0.03;
  std::size_t lr_decay_epoch = 40;
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double beta = 0.05;
  std::size_t k = 6;
  double lambda = 0.3;
  double alpha_per_epoch = 0.01;
  double dropout = 0.0;
  bool augment_noise = true;
  /// Std of the additive batch-time noise; negative means "derive from the
  /// dataset" (half its noise_sigma), resolved by resolve_augment_sigma.
  double augment_sigma = -1.0;
  bool update_with_real = false;
  std::size_t hidden_dim = 64;
  std::size_t embed_dim = 32;
  /// Evaluate every this many epochs when an eval hook is supplied (0: only
  /// after the last epoch).
  std::size_t eval_every = 0;
  Mode mode = Mode::ECN;
  std::uint64_t seed = 1;

  /// Lambda actually used; source_only forces 0.
  double effective_lambda() const { return mode == Mode::source_only ? 0.0 : lambda; }

  void validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (epochs > 0 && warmup_epochs > epochs) fail("field 'warmup_epochs' must be <= epochs");
    if (batch_source < 1) fail("field 'batch_source' must be >= 1");
    if (batch_target < 1) fail("field 'batch_target' must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("field 'lr' must be positive");
    if (!(lr_decay_factor > 0.0) || !std::isfinite(lr_decay_factor)) fail("field 'lr_decay_factor' must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("field 'momentum' must be in [0,1)");
    if (!(beta > 0.0 && beta <= 1.0)) fail("field 'beta' must be in (0,1]");
    if (k < 1) fail("field 'k' must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("field 'lambda' must be in [0,1]");
    if (!(alpha_per_epoch >= 0.0) || !std::isfinite(alpha_per_epoch)) fail("field 'alpha_per_epoch' must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("field 'dropout' must be in [0,1)");
    if (!std::isfinite(augment_sigma)) fail("field 'augment_sigma' must be finite");
    if (hidden_dim < 1) fail("field 'hidden_dim' must be >= 1");
    if (embed_dim < 1) fail("field 'embed_dim' must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline Json to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"warmup_epochs", c.warmup_epochs},
              {"batch_source", c.batch_source},
              {"batch_target", c.batch_target},
              {"lr", c.lr},
              {"lr_decay_epoch", c.lr_decay_epoch},
              {"lr_decay_factor", c.lr_decay_factor},
              {"momentum", c.momentum},
              {"beta", c.beta},
              {"k", c.k},
              {"lambda", c.lambda},
              {"alpha_per_epoch", c.alpha_per_epoch},
              {"dropout", c.dropout},
              {"augment_noise", c.augment_noise},
              {"augment_sigma", c.augment_sigma},
              {"update_with_real", c.update_with_real},
              {"hidden_dim", c.hidden_dim},
              {"embed_dim", c.embed_dim},
              {"eval_every", c.eval_every},
              {"mode", to_string(c.mode)},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& context = "train config") {
  TrainConfig c;
  JsonFields f(j, context);
  f.read("epochs", c.epochs);
  f.read("warmup_epochs", c.warmup_epochs);
  f.read("batch_source", c.batch_source);
  f.read("batch_target", c.batch_target);
  f.read("lr", c.lr);
  f.read("lr_decay_epoch", c.lr_decay_epoch);
  f.read("lr_decay_factor", c.lr_decay_factor);
  f.read("momentum", c.momentum);
  f.read("beta", c.beta);
  f.read("k", c.k);
  f.read("lambda", c.lambda);
  f.read("alpha_per_epoch", c.alpha_per_epoch);
  f.read("dropout", c.dropout);
  f.read("augment_noise", c.augment_noise);
  f.read("augment_sigma", c.augment_sigma);
  f.read("update_with_real", c.update_with_real);
  f.read("hidden_dim", c.hidden_dim);
  f.read("embed_dim", c.embed_dim);
  f.read("eval_every", c.eval_every);
  std::string mode = to_string(c.mode);
  f.read("mode", mode);
  f.read("seed", c.seed);
  f.reject_unknown();
  c.mode = parse_mode(mode);
  c.validate();
  return c;
}

/// Fills in augment_sigma from the generator's noise level when it was left
/// at the "derive" sentinel.
inline void resolve_augment_sigma(TrainConfig& cfg, const DatasetBundle& bundle) {
  if (cfg.augment_sigma >= 0.0) return;
  cfg.augment_sigma = bundle.config ? bundle.config->noise_sigma / 2.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Schedules

/// Memory updating rate for a 1-based epoch: min(alpha_per_epoch * epoch, 1).
inline double alpha_schedule(std::size_t epoch, double alpha_per_epoch = 0.01) {
  if (epoch < 1) throw std::invalid_argument("alpha_schedule: epoch is 1-based");
  return std::min(alpha_per_epoch * static_cast<double>(epoch), 1.0);
}

/// Step decay after lr_decay_epoch.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch < 1) throw std::invalid_argument("lr_schedule: epoch is 1-based");
  return epoch <= cfg.lr_decay_epoch ? cfg.lr : cfg.lr * cfg.lr_decay_factor;
}

/// k used for the target loss: 1 during warm-up and in modes without
/// neighborhood invariance.
inline std::size_t effective_k(Mode mode, std::size_t epoch, const TrainConfig& cfg) {
  if (!uses_neighborhood(mode) || epoch <= cfg.warmup_epochs) return 1;
  return cfg.k;
}

/// The sample forwarded in place of a real target image: uniform over the
/// image and its camera-style variants when camera invariance is on, the real
/// image otherwise.
inline const Sample& sample_xstar(const Sample& real, std::span<const Sample* const> variants, Mode mode,
                                  Prng& rng) {
  if (!uses_camera(mode) || variants.empty()) return real;
  const auto pick = rng.below(variants.size() + 1);
  return pick == 0 ? real : *variants[pick - 1];
}

// ---------------------------------------------------------------------------
// Training

/// What the trainer may see: labeled source images, target images without
/// identities, and their camera-style variants.
struct TrainInputs {
  std::span<const Sample> source_train;
  std::span<const Sample> target_train;
  std::span<const Sample> target_camstyle;

  static TrainInputs from(const DatasetBundle& b) { return {b.source_train, b.target_train, b.target_camstyle}; }

  std::size_t input_dim() const {
    if (!source_train.empty()) return source_train.front().vec.size();
    if (!target_train.empty()) return target_train.front().vec.size();
    return 0;
  }

  std::size_t n_classes() const {
    std::int64_t mx = -1;
    for (const auto& s : source_train) mx = std::max(mx, s.person_id);
    return static_cast<std::size_t>(mx + 1);
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double alpha = 0.0;
  double lr = 0.0;
  std::size_t k = 1;
  double loss_total = 0.0;
  double loss_src = 0.0;
  double loss_tgt = 0.0;
  double loss_exemplar = 0.0;
  double loss_camera = 0.0;
  double loss_neighborhood = 0.0;
  std::optional<double> map;
  std::optional<double> cmc1;
  double seconds = 0.0;
};

struct TrainResult {
  EmbeddingNet net;
  ExemplarMemory memory;
  std::vector<EpochLog> logs;
  std::size_t epochs_completed = 0;
};

using EvalHook = std::function<EvalResult(const EmbeddingNet&)>;

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x7a11'0001;
inline constexpr std::uint64_t kSourceStream = 0x7a11'0002;
inline constexpr std::uint64_t kTargetStream = 0x7a11'0003;

/// Endless shuffled pass over [0, n): reshuffles whenever it runs out.
class Cycler {
 public:
  Cycler(std::size_t n, Prng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  void restart() {
    rng_.shuffle(order_);
    pos_ = 0;
  }

  std::size_t next() {
    if (pos_ == order_.size()) restart();
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  Prng& rng_;
  std::size_t pos_ = 0;
};

inline Vec with_noise(std::span<const double> v, bool enabled, double sigma, Prng& rng) {
  Vec out(v.begin(), v.end());
  if (enabled && sigma > 0.0) {
    for (double& x : out) x += sigma * rng.normal();
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Runs cfg.epochs epochs. Deterministic in (cfg, inputs). `eval_hook`, when
/// given, is called on the current network at the configured cadence and its
/// mAP / rank-1 land in the epoch log.
inline TrainResult train(const TrainConfig& cfg_in, const TrainInputs& data, const EvalHook& eval_hook = {}) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.augment_sigma < 0.0) cfg.augment_sigma = 0.0;
  if (data.source_train.empty()) throw ConfigError("train: source_train is empty");
  if (data.target_train.empty()) throw ConfigError("train: target_train is empty");
  const std::size_t input_dim = data.input_dim();
  const std::size_t n_slots = data.target_train.size();
  if (uses_neighborhood(cfg.mode) && cfg.k > n_slots) {
    throw ConfigError("train config: field 'k' exceeds the number of target images");
  }
  const double lambda = cfg.effective_lambda();

  TrainResult result{init_params(input_dim, cfg.hidden_dim, cfg.embed_dim, data.n_classes(),
                                 detail::stream_seed(cfg.seed, detail::kInitStream), cfg.dropout),
                     ExemplarMemory(n_slots, cfg.embed_dim),
                     {},
                     0};
  EmbeddingNet& net = result.net;
  ExemplarMemory& memory = result.memory;
  SgdState sgd(net, cfg.lr, cfg.momentum);

  // Source and target draws use separate streams so the source trajectory
  // does not depend on what the target branch consumes.
  Prng source_rng(detail::stream_seed(cfg.seed, detail::kSourceStream));
  Prng target_rng(detail::stream_seed(cfg.seed, detail::kTargetStream));

  std::vector<std::vector<const Sample*>> variants(n_slots);
  for (const auto& t : data.target_camstyle) {
    if (t.origin_index < 0 || static_cast<std::size_t>(t.origin_index) >= n_slots) {
      throw ConfigError("train: camstyle sample " + std::to_string(t.index) + " has an invalid origin");
    }
    variants[static_cast<std::size_t>(t.origin_index)].push_back(&t);
  }

  const bool target_branch = cfg.mode != Mode::source_only;
  detail::Cycler source_order(data.source_train.size(), source_rng);
  detail::Cycler target_order(n_slots, target_rng);
  const auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
  // Same count in every mode, so a source-only run and a lambda = 0 run take
  // identical source steps.
  const std::size_t iterations =
      std::max(ceil_div(data.source_train.size(), cfg.batch_source), ceil_div(n_slots, cfg.batch_target));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    log.alpha = alpha_schedule(epoch, cfg.alpha_per_epoch);
    log.lr = lr_schedule(epoch, cfg);
    log.k = effective_k(cfg.mode, epoch, cfg);
    memory.set_alpha(log.alpha);
    sgd.lr = log.lr;
    source_order.restart();
    if (target_branch) target_order.restart();

    for (std::size_t it = 0; it < iterations; ++it) {
      std::vector<ForwardTrace> source_traces;
      std::vector<SourceCe> source_losses;
      source_traces.reserve(cfg.batch_source);
      source_losses.reserve(cfg.batch_source);
      for (std::size_t b = 0; b < cfg.batch_source; ++b) {
        const Sample& s = data.source_train[source_order.next()];
        const Vec x = detail::with_noise(s.vec, cfg.augment_noise, cfg.augment_sigma, source_rng);
        source_traces.push_back(forward(net, x, true, &source_rng));
        source_losses.push_back(source_ce(source_traces.back().logits, static_cast<std::size_t>(s.person_id)));
      }

      std::vector<ForwardTrace> target_traces;
      std::vector<TargetLoss> target_losses;
      std::vector<std::size_t> slots;
      std::vector<const Sample*> forwarded;
      if (target_branch) {
        for (std::size_t b = 0; b < cfg.batch_target; ++b) {
          const std::size_t slot = target_order.next();
          const Sample& xstar = sample_xstar(data.target_train[slot], variants[slot], cfg.mode, target_rng);
          const Vec x = detail::with_noise(xstar.vec, cfg.augment_noise, cfg.augment_sigma, target_rng);
          target_traces.push_back(forward(net, x, true, &target_rng));
          target_losses.push_back(target_loss(memory, target_traces.back().f, slot, log.k, cfg.beta));
          slots.push_back(slot);
          forwarded.push_back(&xstar);
        }
      }

      const LossReport report = combine_batch(source_losses, target_losses, lambda);
      if (!std::isfinite(report.total) || !std::isfinite(report.src) || !std::isfinite(report.tgt)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it + 1) +
                           " (src=" + detail::fmt_double(report.src) + ", tgt=" + detail::fmt_double(report.tgt) + ")");
      }

      ParamGrads grads = net.params.zeros_like();
      for (std::size_t b = 0; b < source_traces.size(); ++b) {
        backward_accumulate(net, source_traces[b], std::nullopt, std::span<const double>(report.grad_logits[b]), grads);
      }
      for (std::size_t b = 0; b < target_traces.size(); ++b) {
        backward_accumulate(net, target_traces[b], std::span<const double>(report.grad_embeddings[b]), std::nullopt,
                            grads);
      }
      sgd_step(net, grads, sgd);

      for (std::size_t b = 0; b < slots.size(); ++b) {
        if (cfg.update_with_real && forwarded[b]->transferred_to_camera) {
          const ForwardTrace real = forward(net, data.target_train[slots[b]].vec, true, &target_rng);
          memory.update(slots[b], real.f);
        } else {
          memory.update(slots[b], target_traces[b].f);
        }
      }

      log.loss_total += report.total;
      log.loss_src += report.src;
      log.loss_tgt += report.tgt;
      log.loss_neighborhood += report.tgt_split.neighborhood;
      for (std::size_t b = 0; b < target_losses.size(); ++b) {
        const double share = target_losses[b].self_term / static_cast<double>(target_losses.size());
        (forwarded[b]->transferred_to_camera ? log.loss_camera : log.loss_exemplar) += share;
      }
    }

    const auto n_it = static_cast<double>(iterations);
    for (double* v : {&log.loss_total, &log.loss_src, &log.loss_tgt, &log.loss_exemplar, &log.loss_camera,
                      &log.loss_neighborhood}) {
      *v /= n_it;
    }
    if (eval_hook && (epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0))) {
      const EvalResult er = eval_hook(net);
      log.map = er.map;
      log.cmc1 = er.cmc_at(1);
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.logs.push_back(log);
    result.epochs_completed = epoch;
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const DatasetBundle& bundle, const EvalHook& eval_hook = {}) {
  return train(cfg, TrainInputs::from(bundle), eval_hook);
}

/// metrics.csv: one row per epoch, deterministic content only.
inline std::string metrics_csv(std::span<const EpochLog> logs) {
  std::ostringstream out;
  out << "epoch,alpha,lr,k,loss_total,loss_src,loss_tgt,loss_exemplar,loss_camera,loss_neighborhood,map,cmc1\n";
  for (const auto& l : logs) {
    out << l.epoch << ',' << detail::fmt_double(l.alpha) << ',' << detail::fmt_double(l.lr) << ',' << l.k << ','
        << detail::fmt_double(l.loss_total) << ',' << detail::fmt_double(l.loss_src) << ','
        << detail::fmt_double(l.loss_tgt) << ',' << detail::fmt_double(l.loss_exemplar) << ','
        << detail::fmt_double(l.loss_camera) << ',' << detail::fmt_double(l.loss_neighborhood) << ','
        << (l.map ? detail::fmt_double(*l.map) : "") << ',' << (l.cmc1 ? detail::fmt_double(*l.cmc1) : "") << '\n';
  }
  return out.str();
}

/// timing.csv: wall-clock per epoch, kept apart so metrics.csv stays
/// reproducible byte for byte.
inline std::string timing_csv(std::span<const EpochLog> logs) {
  std::ostringstream out;
  out << "epoch,seconds\n";
  for (const auto& l : logs) out << l.epoch << ',' << detail::fmt_double(l.seconds) << '\n';
  return out.str();
}

}  // namespace ecn
