#pragma once

// Loss terms and their analytic gradients: source classification, the
// memory-based exemplar/camera/neighborhood invariance loss, and the weighted
// combination of the two branches.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ecn/memory.hpp"
#include "ecn/numerics.hpp"

namespace ecn {

struct SourceCe {
  double loss = 0.0;
  Vec grad_logits;
};

/// -log softmax(logits)[label] and its gradient softmax - one_hot.
inline SourceCe source_ce(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw std::out_of_range("source_ce: label out of range");
  const Vec logp = log_softmax(logits);
  SourceCe out;
  out.loss = -logp[label];
  out.grad_logits.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out.grad_logits[j] = std::exp(logp[j]);
  out.grad_logits[label] -= 1.0;
  return out;
}

/// Soft-label weights over a neighbor set: 1 for the anchor, 1/k for each
/// other neighbor. They sum to 1 + (k-1)/k and are used as is.
struct NeighborWeights {
  std::size_t anchor = 0;
  std::vector<std::pair<std::size_t, double>> entries;

  double sum() const {
    double s = 0.0;
    for (const auto& [slot, w] : entries) s += w;
    return s;
  }
};

inline NeighborWeights neighbor_weights(const NeighborSet& neighbors, std::size_t k) {
  if (neighbors.size() != k || k == 0) {
    throw std::invalid_argument("neighbor_weights: neighbor set size must equal k");
  }
  NeighborWeights w;
  w.anchor = neighbors.indices.front();
  w.entries.reserve(k);
  w.entries.emplace_back(w.anchor, 1.0);
  const double other = 1.0 / static_cast<double>(k);
  for (std::size_t n = 1; n < k; ++n) w.entries.emplace_back(neighbors.indices[n], other);
  return w;
}

struct TargetLoss {
  double loss = 0.0;
  /// -log p(anchor): exemplar invariance for a real input, camera invariance
  /// for a style-transferred one.
  double self_term = 0.0;
  /// -sum_{j != anchor} w_j log p(j).
  double neighborhood = 0.0;
  Vec grad_f;
  NeighborSet neighbors;
};

/// Weighted soft-label cross-entropy of f against the memory:
///   loss = -sum_{j in knn(anchor, f, k)} w_j log p(j | f).
/// The gradient stops at the memory keys:
///   dL/df = (1/beta) (S_w sum_l p_l K[l] - sum_j w_j K[j]).
inline TargetLoss target_loss(const ExemplarMemory& mem, std::span<const double> f, std::size_t anchor,
                              std::size_t k, double beta) {
  const Vec sims = mem.similarities(f);
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("target_loss: beta must be in (0,1]");
  Vec logits(sims.size());
  for (std::size_t j = 0; j < sims.size(); ++j) logits[j] = sims[j] / beta;
  const Vec logp = log_softmax(logits);

  TargetLoss out;
  out.neighbors = mem.knn_from_similarities(anchor, sims, k);
  const NeighborWeights weights = neighbor_weights(out.neighbors, k);

  for (const auto& [slot, w] : weights.entries) {
    const double term = -w * logp[slot];
    if (slot == anchor) {
      out.self_term += term;
    } else {
      out.neighborhood += term;
    }
  }
  out.loss = out.self_term + out.neighborhood;

  const double weight_sum = weights.sum();
  out.grad_f.assign(mem.dim(), 0.0);
  const Mat& keys = mem.keys();
  for (std::size_t l = 0; l < mem.n_slots(); ++l) {
    axpy(weight_sum * std::exp(logp[l]), keys.row(l), out.grad_f);
  }
  for (const auto& [slot, w] : weights.entries) axpy(-w, keys.row(slot), out.grad_f);
  for (double& g : out.grad_f) g /= beta;
  return out;
}

/// (1 - lambda) src + lambda tgt.
inline double total_loss(double src_loss, double tgt_loss, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("total_loss: lambda must be in [0,1]");
  return (1.0 - lambda) * src_loss + lambda * tgt_loss;
}

/// Per-batch losses and the gradients handed to backprop.
struct LossReport {
  double total = 0.0;
  double src = 0.0;
  double tgt = 0.0;
  struct {
    double exemplar_or_camera = 0.0;
    double neighborhood = 0.0;
  } tgt_split;
  /// d total / d f for each target sample (batch mean and lambda applied).
  std::vector<Vec> grad_embeddings;
  /// d total / d logits for each source sample (batch mean and 1 - lambda applied).
  std::vector<Vec> grad_logits;
};

/// Batch means of both branches combined with weight lambda. Gradients are
/// scaled so that they are exact derivatives of `total`.
inline LossReport combine_batch(std::span<const SourceCe> source, std::span<const TargetLoss> target,
                                double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("combine_batch: lambda must be in [0,1]");
  LossReport r;
  if (!source.empty()) {
    const double scale = (1.0 - lambda) / static_cast<double>(source.size());
    for (const auto& s : source) {
      r.src += s.loss;
      Vec g = s.grad_logits;
      for (double& x : g) x *= scale;
      r.grad_logits.push_back(std::move(g));
    }
    r.src /= static_cast<double>(source.size());
  }
  if (!target.empty()) {
    const double scale = lambda / static_cast<double>(target.size());
    for (const auto& t : target) {
      r.tgt += t.loss;
      r.tgt_split.exemplar_or_camera += t.self_term;
      r.tgt_split.neighborhood += t.neighborhood;
      Vec g = t.grad_f;
      for (double& x : g) x *= scale;
      r.grad_embeddings.push_back(std::move(g));
    }
    const auto n = static_cast<double>(target.size());
    r.tgt /= n;
    r.tgt_split.exemplar_or_camera /= n;
    r.tgt_split.neighborhood /= n;
  }
  r.total = total_loss(r.src, r.tgt, lambda);
  return r;
}

}  // namespace ecn
