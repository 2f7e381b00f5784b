#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "ecn/invariance.hpp"
#include "ecn/model.hpp"

namespace ecn {
namespace {

Vec unit(Prng& rng, std::size_t d) {
  Vec v(d);
  for (double& x : v) x = rng.normal();
  return l2_normalize(v);
}

ExemplarMemory random_memory(Prng& rng, std::size_t n, std::size_t d, double fill = 1.0) {
  ExemplarMemory m(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < fill) m.update(i, unit(rng, d), 0.0);
  }
  return m;
}

/// Loss recomputed from its definition with a fixed neighbor set, for use
/// under finite differences. Independent of target_loss.
double reference_target_loss(const ExemplarMemory& mem, std::span<const double> f, const NeighborSet& neighbors,
                             std::size_t k, double beta) {
  Vec logits(mem.n_slots());
  for (std::size_t j = 0; j < mem.n_slots(); ++j) logits[j] = dot(mem.key(j), f) / beta;
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  double loss = 0.0;
  for (std::size_t n = 0; n < neighbors.size(); ++n) {
    const double w = n == 0 ? 1.0 : 1.0 / static_cast<double>(k);
    loss -= w * (logits[neighbors.indices[n]] - mx - std::log(z));
  }
  return loss;
}

TEST(SourceCe, Examples) {
  const SourceCe uniform = source_ce(Vec(4, 0.7), 2);
  EXPECT_NEAR(uniform.loss, 1.3862943611198906, 1e-14);

  const SourceCe peaked = source_ce(Vec{10.0, -10.0}, 0);
  EXPECT_NEAR(peaked.loss, 2.061153620314381e-09, 1e-18);

  Prng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Vec logits(2 + rng.below(20));
    for (double& x : logits) x = 5.0 * rng.normal();
    const SourceCe ce = source_ce(logits, rng.below(logits.size()));
    EXPECT_NEAR(std::accumulate(ce.grad_logits.begin(), ce.grad_logits.end(), 0.0), 0.0, 1e-12);
  }
  EXPECT_THROW(source_ce(Vec{1.0, 2.0}, 2), std::out_of_range);
}

TEST(SourceCe, GradientMatchesFiniteDifferences) {
  Prng rng(2);
  Vec logits(6);
  for (double& x : logits) x = rng.normal();
  const SourceCe ce = source_ce(logits, 4);
  const Vec fd = finite_diff_grad([](std::span<const double> x) { return source_ce(x, 4).loss; }, logits);
  EXPECT_LT(relative_error(ce.grad_logits, fd), 1e-8);
}

TEST(SourceCe, GradientStepDecreasesLoss) {
  Prng rng(3);
  EmbeddingNet net = init_params(6, 8, 4, 5, 17);
  std::vector<Vec> xs;
  std::vector<std::size_t> ys;
  for (int i = 0; i < 8; ++i) {
    Vec x(6);
    for (double& v : x) v = rng.normal();
    xs.push_back(x);
    ys.push_back(rng.below(5));
  }
  const auto batch_loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += source_ce(forward(net, xs[i], false).logits, ys[i]).loss;
    return s / static_cast<double>(xs.size());
  };
  const double before = batch_loss();
  ParamGrads g = net.params.zeros_like();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const ForwardTrace t = forward(net, xs[i], false);
    Vec gl = source_ce(t.logits, ys[i]).grad_logits;
    for (double& v : gl) v /= static_cast<double>(xs.size());
    backward_accumulate(net, t, std::nullopt, std::span<const double>(gl), g);
  }
  SgdState sgd(net, 1e-3, 0.0);
  sgd_step(net, g, sgd);
  EXPECT_LT(batch_loss(), before);
}

TEST(NeighborWeights, Examples) {
  NeighborSet six;
  six.indices = {4, 0, 1, 2, 3, 5};
  six.similarities.assign(6, 0.0);
  const NeighborWeights w = neighbor_weights(six, 6);
  ASSERT_EQ(w.entries.size(), 6u);
  EXPECT_EQ(w.anchor, 4u);
  EXPECT_EQ(w.entries[0], (std::pair<std::size_t, double>{4, 1.0}));
  double others = 0.0;
  for (std::size_t n = 1; n < 6; ++n) {
    EXPECT_NEAR(w.entries[n].second, 0.16666666666666666, 1e-16);
    others += w.entries[n].second;
  }
  EXPECT_NEAR(others, 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(w.sum(), 1.0 + 5.0 / 6.0, 1e-15);

  NeighborSet one;
  one.indices = {7};
  one.similarities = {0.0};
  const NeighborWeights w1 = neighbor_weights(one, 1);
  ASSERT_EQ(w1.entries.size(), 1u);
  EXPECT_EQ(w1.entries[0], (std::pair<std::size_t, double>{7, 1.0}));
  EXPECT_THROW(neighbor_weights(one, 2), std::invalid_argument);
}

TEST(TargetLoss, KOneIsSelfTermOnly) {
  Prng rng(4);
  const auto m = random_memory(rng, 15, 5);
  const Vec f = unit(rng, 5);
  const TargetLoss t = target_loss(m, f, 3, 1, 0.05);
  EXPECT_EQ(t.neighborhood, 0.0);
  EXPECT_EQ(t.loss, t.self_term);
  EXPECT_NEAR(t.loss, -std::log(m.probabilities(f, 0.05)[3]), 1e-10);
}

TEST(TargetLoss, FreshMemoryGivesLogN) {
  const ExemplarMemory m(20, 4);
  const TargetLoss t = target_loss(m, l2_normalize(Vec{1, 2, 3, 4}), 0, 1, 0.05);
  EXPECT_NEAR(t.loss, std::log(20.0), 1e-12);
  const TargetLoss t3 = target_loss(m, l2_normalize(Vec{1, 2, 3, 4}), 0, 3, 0.05);
  EXPECT_NEAR(t3.loss, (1.0 + 2.0 / 3.0) * std::log(20.0), 1e-12);
}

TEST(TargetLoss, SplitAddsUpAndNonNegative) {
  Prng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_memory(rng, 25, 6, 0.8);
    const std::size_t k = 1 + rng.below(8);
    const TargetLoss t = target_loss(m, unit(rng, 6), rng.below(25), k, 0.05 + 0.95 * rng.uniform());
    EXPECT_GE(t.loss, 0.0);
    EXPECT_GE(t.neighborhood, 0.0);
    EXPECT_NEAR(t.loss, t.self_term + t.neighborhood, 1e-12);
    EXPECT_EQ(t.neighbors.size(), k);
  }
}

TEST(TargetLoss, GradientMatchesFiniteDifferences) {
  Prng rng(6);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto m = random_memory(rng, 20, 8);
    const std::size_t k = std::array<std::size_t, 3>{1, 3, 6}[trial % 3];
    const double beta = trial % 2 == 0 ? 0.05 : 0.5;
    const std::size_t anchor = rng.below(20);
    const Vec f = unit(rng, 8);
    const TargetLoss t = target_loss(m, f, anchor, k, beta);
    // Differentiate along the unconstrained input; the neighbor set is held
    // fixed, which matches the analytic gradient away from ranking ties.
    const auto loss_at = [&](std::span<const double> x) { return reference_target_loss(m, x, t.neighbors, k, beta); };
    const Vec fd = finite_diff_grad(loss_at, f, 1e-6);
    EXPECT_LT(relative_error(t.grad_f, fd), 1e-5) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(TargetLoss, ChainedGradientOrthogonalToFeature) {
  Prng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_memory(rng, 20, 5);
    Vec e(5);
    for (double& x : e) x = 3.0 * rng.normal();
    const Vec f = l2_normalize(e);
    const TargetLoss t = target_loss(m, f, rng.below(20), 4, 0.05);
    EXPECT_NEAR(dot(l2_normalize_vjp(e, t.grad_f), f), 0.0, 1e-10);
  }
}

TEST(TargetLoss, NoGradientThroughKeys) {
  Prng rng(8);
  const auto m = random_memory(rng, 10, 4);
  const Mat before = m.keys();
  (void)target_loss(m, unit(rng, 4), 2, 3, 0.05);
  EXPECT_EQ(m.keys(), before);
}

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss(2.5, 7.0, 0.0), 2.5);
  EXPECT_EQ(total_loss(2.5, 7.0, 1.0), 7.0);
  EXPECT_NEAR(total_loss(2.0, 1.0, 0.3), 1.7, 1e-15);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), std::invalid_argument);
  EXPECT_THROW(total_loss(1.0, 1.0, 1.1), std::invalid_argument);
}

TEST(CombineBatch, TotalMatchesWeightedMeans) {
  Prng rng(9);
  const auto m = random_memory(rng, 12, 4);
  std::vector<SourceCe> src;
  std::vector<TargetLoss> tgt;
  for (int i = 0; i < 3; ++i) src.push_back(source_ce(Vec{rng.normal(), rng.normal(), rng.normal()}, 1));
  for (int i = 0; i < 5; ++i) tgt.push_back(target_loss(m, unit(rng, 4), rng.below(12), 3, 0.05));
  const LossReport r = combine_batch(src, tgt, 0.3);
  EXPECT_NEAR(r.total, 0.7 * r.src + 0.3 * r.tgt, 1e-10);
  EXPECT_NEAR(r.tgt, r.tgt_split.exemplar_or_camera + r.tgt_split.neighborhood, 1e-12);
  ASSERT_EQ(r.grad_logits.size(), 3u);
  ASSERT_EQ(r.grad_embeddings.size(), 5u);
  EXPECT_NEAR(r.grad_logits[0][2], src[0].grad_logits[2] * 0.7 / 3.0, 1e-15);
  EXPECT_NEAR(r.grad_embeddings[4][1], tgt[4].grad_f[1] * 0.3 / 5.0, 1e-15);
}

}  // namespace
}  // namespace ecn
