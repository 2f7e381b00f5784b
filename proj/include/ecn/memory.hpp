#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecn/numerics.hpp"

namespace ecn {

inline constexpr double kUnitTolerance = 1e-6;

/// Slot indices of the k nearest memory entries to a feature, anchor first.
struct NeighborSet {
  std::vector<std::size_t> indices;
  std::vector<double> similarities;

  std::size_t size() const { return indices.size(); }
};

/// Key-value store holding one L2-normalized feature per target training
/// sample. Values are the slot indices themselves and never change; keys start
/// at zero and move by momentum updates.
class ExemplarMemory {
 public:
  ExemplarMemory(std::size_t n_slots, std::size_t dim) : keys_(check(n_slots, dim)), values_(n_slots) {
    std::iota(values_.begin(), values_.end(), std::size_t{0});
  }

  std::size_t n_slots() const { return keys_.rows(); }
  std::size_t dim() const { return keys_.cols(); }

  const Mat& keys() const { return keys_; }
  std::span<const double> key(std::size_t i) const { return keys_.row(checked_slot(i)); }
  const std::vector<std::size_t>& values() const { return values_; }

  /// Updating rate set by the trainer once per epoch; unset on a new memory.
  std::optional<double> alpha() const { return alpha_; }
  void set_alpha(double a) {
    check_alpha(a);
    alpha_ = a;
  }

  /// K[i] <- normalize(alpha K[i] + (1 - alpha) f).
  void update(std::size_t i, std::span<const double> f, double alpha) {
    checked_slot(i);
    check_alpha(alpha);
    check_feature(f);
    auto k = keys_.row(i);
    Vec blended(dim());
    for (std::size_t c = 0; c < dim(); ++c) blended[c] = alpha * k[c] + (1.0 - alpha) * f[c];
    const Vec normalized = l2_normalize(blended);
    std::copy(normalized.begin(), normalized.end(), k.begin());
  }

  /// Update with the rate stored by set_alpha.
  void update(std::size_t i, std::span<const double> f) {
    if (!alpha_) throw std::logic_error("ExemplarMemory::update: alpha not set");
    update(i, f, *alpha_);
  }

  /// Cosine similarities K[j]^T f for every slot.
  Vec similarities(std::span<const double> f) const {
    check_feature(f);
    return matvec(keys_, f);
  }

  /// Logits K[j]^T f / beta.
  Vec scores(std::span<const double> f, double beta) const {
    if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("scores: beta must be in (0,1]");
    Vec s = similarities(f);
    for (double& x : s) x /= beta;
    return s;
  }

  /// p(j | f) over all slots.
  Vec probabilities(std::span<const double> f, double beta) const {
    return softmax_temp(scores(f, beta), 1.0);
  }

  /// The anchor slot followed by the k - 1 most similar other slots
  /// (descending similarity, ties by ascending index).
  NeighborSet knn(std::size_t anchor, std::span<const double> f, std::size_t k) const {
    return knn_from_similarities(anchor, similarities(f), k);
  }

  /// knn over precomputed K^T f, for callers that already hold the scores.
  NeighborSet knn_from_similarities(std::size_t anchor, std::span<const double> sims,
                                    std::size_t k) const {
    checked_slot(anchor);
    if (k < 1 || k > n_slots()) throw std::out_of_range("knn: k must be in [1, n_slots]");
    if (sims.size() != n_slots()) throw std::invalid_argument("knn: similarity length mismatch");

    NeighborSet out;
    out.indices.reserve(k);
    out.similarities.reserve(k);
    out.indices.push_back(anchor);
    out.similarities.push_back(sims[anchor]);
    if (k == 1) return out;

    std::vector<std::size_t> others;
    others.reserve(n_slots() - 1);
    for (std::size_t j = 0; j < n_slots(); ++j) {
      if (j != anchor) others.push_back(j);
    }
    const auto closer = [&](std::size_t a, std::size_t b) {
      if (sims[a] != sims[b]) return sims[a] > sims[b];
      return a < b;
    };
    const auto mid = others.begin() + static_cast<std::ptrdiff_t>(k - 1);
    std::partial_sort(others.begin(), mid, others.end(), closer);
    for (auto it = others.begin(); it != mid; ++it) {
      out.indices.push_back(*it);
      out.similarities.push_back(sims[*it]);
    }
    return out;
  }

  /// Overwrite all keys, e.g. when restoring a checkpoint. Rows must be zero
  /// or unit norm.
  void load_keys(const Mat& keys) {
    if (keys.rows() != n_slots() || keys.cols() != dim()) {
      throw std::invalid_argument("load_keys: shape mismatch");
    }
    for (std::size_t r = 0; r < keys.rows(); ++r) {
      const double n = norm2(keys.row(r));
      if (n != 0.0 && std::abs(n - 1.0) > 1e-9) {
        throw std::invalid_argument("load_keys: row " + std::to_string(r) + " is neither zero nor unit norm");
      }
    }
    keys_ = keys;
  }

 private:
  static Mat check(std::size_t n_slots, std::size_t dim) {
    if (n_slots == 0 || dim == 0) throw std::invalid_argument("ExemplarMemory: sizes must be >= 1");
    return Mat(n_slots, dim);
  }

  static void check_alpha(double a) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("ExemplarMemory: alpha must be in [0,1]");
  }

  std::size_t checked_slot(std::size_t i) const {
    if (i >= n_slots()) {
      throw std::out_of_range("ExemplarMemory: slot " + std::to_string(i) + " out of range");
    }
    return i;
  }

  void check_feature(std::span<const double> f) const {
    if (f.size() != dim()) throw std::invalid_argument("ExemplarMemory: feature dimension mismatch");
    if (std::abs(norm2(f) - 1.0) > kUnitTolerance) {
      throw std::invalid_argument("ExemplarMemory: feature is not unit norm");
    }
  }

  Mat keys_;
  std::vector<std::size_t> values_;
  std::optional<double> alpha_;
};

}  // namespace ecn
