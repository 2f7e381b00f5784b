#pragma once

// Cross-camera retrieval evaluation with the Market-1501 conventions: gallery
// entries sharing both identity and camera with the query are dropped before
// scoring, CMC counts the first correct match, and AP averages precision at
// each hit.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ecn/datagen.hpp"
#include "ecn/model.hpp"
#include "ecn/numerics.hpp"

namespace ecn {

struct EvalResult {
  /// cmc[r] is the fraction of queries matched within the top r + 1.
  Vec cmc;
  double map = 0.0;
  std::size_t n_queries = 0;
  std::size_t skipped = 0;
  Vec per_query_ap;

  double cmc_at(std::size_t rank) const {
    if (rank == 0 || cmc.empty()) return 0.0;
    return cmc[std::min(rank, cmc.size()) - 1];
  }
};

/// Features plus the identity/camera labels retrieval needs.
struct LabeledFeatures {
  Mat features;
  std::vector<std::int64_t> person_ids;
  std::vector<std::int64_t> camera_ids;

  std::size_t size() const { return features.rows(); }
};

/// Normalized embeddings in eval mode, one row per sample.
inline Mat extract_features(const EmbeddingNet& net, std::span<const Sample> samples) {
  Mat out(samples.size(), net.embed_dim());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ForwardTrace t = forward(net, samples[i].vec, /*train_mode=*/false);
    std::copy(t.f.begin(), t.f.end(), out.row(i).begin());
  }
  return out;
}

inline LabeledFeatures extract_labeled(const EmbeddingNet& net, std::span<const Sample> samples) {
  LabeledFeatures lf;
  lf.features = extract_features(net, samples);
  for (const auto& s : samples) {
    lf.person_ids.push_back(s.person_id);
    lf.camera_ids.push_back(s.camera_id);
  }
  return lf;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

/// Gallery indices by ascending Euclidean distance to `query`, ties by index.
inline std::vector<std::size_t> rank_gallery(std::span<const double> query, const Mat& gallery) {
  if (gallery.rows() == 0) throw std::invalid_argument("rank_gallery: empty gallery");
  if (gallery.cols() != query.size()) throw std::invalid_argument("rank_gallery: dimension mismatch");
  Vec dist(gallery.rows());
  for (std::size_t g = 0; g < gallery.rows(); ++g) dist[g] = squared_distance(query, gallery.row(g));
  std::vector<std::size_t> order(gallery.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return a < b;
  });
  return order;
}

/// CMC up to `max_rank` and mAP. Queries without any valid match are skipped
/// and counted.
inline EvalResult cmc_map(const LabeledFeatures& queries, const LabeledFeatures& gallery, std::size_t max_rank) {
  if (max_rank == 0) throw std::invalid_argument("cmc_map: max_rank must be >= 1");
  if (queries.person_ids.size() != queries.size() || queries.camera_ids.size() != queries.size() ||
      gallery.person_ids.size() != gallery.size() || gallery.camera_ids.size() != gallery.size()) {
    throw std::invalid_argument("cmc_map: label arrays do not match features");
  }
  EvalResult r;
  std::vector<std::size_t> first_hit_counts(max_rank, 0);

  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto order = rank_gallery(queries.features.row(q), gallery.features);
    const auto pid = queries.person_ids[q];
    const auto cam = queries.camera_ids[q];

    std::size_t position = 0;  // rank within the filtered list
    std::size_t hits = 0;
    double precision_sum = 0.0;
    std::optional<std::size_t> first_hit;
    for (const std::size_t g : order) {
      const bool same_id = gallery.person_ids[g] == pid;
      if (same_id && gallery.camera_ids[g] == cam) continue;  // junk
      ++position;
      if (same_id) {
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(position);
        if (!first_hit) first_hit = position;
      }
    }
    if (hits == 0) {
      ++r.skipped;
      continue;
    }
    r.per_query_ap.push_back(precision_sum / static_cast<double>(hits));
    if (*first_hit <= max_rank) ++first_hit_counts[*first_hit - 1];
  }

  r.n_queries = r.per_query_ap.size();
  r.cmc.assign(max_rank, 0.0);
  if (r.n_queries > 0) {
    std::size_t cumulative = 0;
    for (std::size_t k = 0; k < max_rank; ++k) {
      cumulative += first_hit_counts[k];
      r.cmc[k] = static_cast<double>(cumulative) / static_cast<double>(r.n_queries);
    }
    r.map = std::accumulate(r.per_query_ap.begin(), r.per_query_ap.end(), 0.0) / static_cast<double>(r.n_queries);
  }
  return r;
}

/// Extracts query and gallery features and scores them. max_rank 0 means the
/// whole gallery.
inline EvalResult evaluate(const EmbeddingNet& net, std::span<const Sample> query, std::span<const Sample> gallery,
                           std::size_t max_rank = 0) {
  if (max_rank == 0) max_rank = std::max<std::size_t>(gallery.size(), 1);
  return cmc_map(extract_labeled(net, query), extract_labeled(net, gallery), max_rank);
}

inline Json to_json(const EvalResult& r) {
  return Json{{"map", r.map}, {"cmc", r.cmc}, {"n_queries", r.n_queries}, {"skipped", r.skipped}};
}

}  // namespace ecn
