#pragma once

// End-to-end gradient check for the joint loss on a micro-batch. The analytic
// side runs the same path as the trainer (source_ce / target_loss ->
// combine_batch -> backward_accumulate); the numeric side recomputes the loss
// from its definition with central differences over every parameter.

#include <cmath>
#include <string>
#include <vector>

#include "ecn/invariance.hpp"
#include "ecn/memory.hpp"
#include "ecn/model.hpp"
#include "ecn/numerics.hpp"

namespace ecn::testing {

struct MicroConfig {
  std::size_t input_dim = 5;
  std::size_t hidden_dim = 7;
  std::size_t embed_dim = 4;
  std::size_t n_classes = 3;
  std::size_t n_slots = 20;
  std::size_t n_source = 4;
  std::size_t n_target = 4;
  std::size_t k = 3;
  double beta = 0.05;
  double lambda = 0.3;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  /// Symmetric relative error per parameter tensor (W1, b1, W2, b2, Wc, bc).
  std::array<double, kNumParamTensors> rel_error{};
  double worst = 0.0;
  std::size_t n_params = 0;
};

struct MicroProblem {
  EmbeddingNet net;
  ExemplarMemory memory{1, 1};
  std::vector<Vec> source_x;
  std::vector<std::size_t> source_y;
  std::vector<Vec> target_x;
  std::vector<std::size_t> target_slot;
};

inline MicroProblem make_micro_problem(const MicroConfig& c) {
  Prng rng(c.seed);
  MicroProblem p;
  p.net = init_params(c.input_dim, c.hidden_dim, c.embed_dim, c.n_classes, rng.next_u64());
  // Non-zero biases so the check also covers their gradients meaningfully.
  for (auto t : p.net.params.tensors()) {
    for (double& v : t) v += 0.1 * rng.normal();
  }
  p.memory = ExemplarMemory(c.n_slots, c.embed_dim);
  for (std::size_t i = 0; i < c.n_slots; ++i) {
    Vec v(c.embed_dim);
    for (double& x : v) x = rng.normal();
    p.memory.update(i, l2_normalize(v), 0.0);
  }
  const auto draw = [&] {
    Vec x(c.input_dim);
    for (double& v : x) v = rng.normal();
    return x;
  };
  for (std::size_t i = 0; i < c.n_source; ++i) {
    p.source_x.push_back(draw());
    p.source_y.push_back(rng.below(c.n_classes));
  }
  for (std::size_t i = 0; i < c.n_target; ++i) {
    p.target_x.push_back(draw());
    p.target_slot.push_back(rng.below(c.n_slots));
  }
  return p;
}

/// The joint loss recomputed from scratch with fixed neighbor sets.
inline double reference_total_loss(const EmbeddingNet& net, const MicroProblem& p, const MicroConfig& c,
                                   const std::vector<NeighborSet>& neighbors) {
  double src = 0.0;
  for (std::size_t i = 0; i < p.source_x.size(); ++i) {
    const Vec logits = forward(net, p.source_x[i], false).logits;
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    src += -(logits[p.source_y[i]] - mx - std::log(z));
  }
  src /= static_cast<double>(p.source_x.size());

  double tgt = 0.0;
  for (std::size_t i = 0; i < p.target_x.size(); ++i) {
    const Vec e = forward(net, p.target_x[i], false).e;
    const double n = std::sqrt(dot(e, e));
    Vec logits(c.n_slots);
    for (std::size_t j = 0; j < c.n_slots; ++j) logits[j] = dot(p.memory.key(j), e) / n / c.beta;
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const NeighborSet& ns = neighbors[i];
    for (std::size_t m = 0; m < ns.size(); ++m) {
      const double w = m == 0 ? 1.0 : 1.0 / static_cast<double>(c.k);
      tgt -= w * (logits[ns.indices[m]] - mx - std::log(z));
    }
  }
  tgt /= static_cast<double>(p.target_x.size());
  return (1.0 - c.lambda) * src + c.lambda * tgt;
}

inline GradCheckResult run_gradient_check(const MicroConfig& c, double h = 1e-5) {
  MicroProblem p = make_micro_problem(c);

  std::vector<ForwardTrace> src_traces, tgt_traces;
  std::vector<SourceCe> src;
  std::vector<TargetLoss> tgt;
  for (std::size_t i = 0; i < p.source_x.size(); ++i) {
    src_traces.push_back(forward(p.net, p.source_x[i], false));
    src.push_back(source_ce(src_traces.back().logits, p.source_y[i]));
  }
  std::vector<NeighborSet> neighbors;
  for (std::size_t i = 0; i < p.target_x.size(); ++i) {
    tgt_traces.push_back(forward(p.net, p.target_x[i], false));
    tgt.push_back(target_loss(p.memory, tgt_traces.back().f, p.target_slot[i], c.k, c.beta));
    neighbors.push_back(tgt.back().neighbors);
  }
  const LossReport report = combine_batch(src, tgt, c.lambda);
  ParamGrads analytic = p.net.params.zeros_like();
  for (std::size_t i = 0; i < src_traces.size(); ++i) {
    backward_accumulate(p.net, src_traces[i], std::nullopt, std::span<const double>(report.grad_logits[i]), analytic);
  }
  for (std::size_t i = 0; i < tgt_traces.size(); ++i) {
    backward_accumulate(p.net, tgt_traces[i], std::span<const double>(report.grad_embeddings[i]), std::nullopt,
                        analytic);
  }

  GradCheckResult result;
  auto params = p.net.params.tensors();
  const auto grads = analytic.tensors();
  for (std::size_t t = 0; t < kNumParamTensors; ++t) {
    Vec numeric(params[t].size());
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double orig = params[t][i];
      params[t][i] = orig + h;
      const double up = reference_total_loss(p.net, p, c, neighbors);
      params[t][i] = orig - h;
      const double down = reference_total_loss(p.net, p, c, neighbors);
      params[t][i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    result.rel_error[t] = relative_error(grads[t], numeric, 1e-12);
    result.worst = std::max(result.worst, result.rel_error[t]);
    result.n_params += numeric.size();
  }
  return result;
}

}  // namespace ecn::testing
