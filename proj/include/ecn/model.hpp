#pragma once

// Small embedding network: x -> ReLU(W1 x + b1) -> [dropout] -> e = W2 h + b2,
// f = e / ||e|| feeds the memory losses and logits = Wc e + bc feed the source
// classifier. Backprop is written out by hand.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>

#include "ecn/numerics.hpp"

namespace ecn {

inline constexpr std::size_t kNumParamTensors = 6;
inline constexpr std::array<std::string_view, kNumParamTensors> kParamNames = {"W1", "b1", "W2",
                                                                                "b2", "Wc", "bc"};

/// Parameter-shaped storage; used both for the network weights and for their
/// gradients / optimizer velocities.
struct NetTensors {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  Mat wc;
  Vec bc;

  std::array<std::span<double>, kNumParamTensors> tensors() {
    return {w1.data(), b1, w2.data(), b2, wc.data(), bc};
  }
  std::array<std::span<const double>, kNumParamTensors> tensors() const {
    return {w1.data(), b1, w2.data(), b2, wc.data(), bc};
  }

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t embed_dim() const { return w2.rows(); }
  std::size_t n_classes() const { return wc.rows(); }

  /// Zero-filled tensors with the same shapes.
  NetTensors zeros_like() const {
    return {Mat(w1.rows(), w1.cols()), Vec(b1.size(), 0.0), Mat(w2.rows(), w2.cols()),
            Vec(b2.size(), 0.0),       Mat(wc.rows(), wc.cols()), Vec(bc.size(), 0.0)};
  }

  bool same_shape(const NetTensors& o) const {
    return w1.rows() == o.w1.rows() && w1.cols() == o.w1.cols() && b1.size() == o.b1.size() &&
           w2.rows() == o.w2.rows() && w2.cols() == o.w2.cols() && b2.size() == o.b2.size() &&
           wc.rows() == o.wc.rows() && wc.cols() == o.wc.cols() && bc.size() == o.bc.size();
  }

  bool operator==(const NetTensors&) const = default;
};

using ParamGrads = NetTensors;

struct EmbeddingNet {
  NetTensors params;
  double dropout_rate = 0.0;

  std::size_t input_dim() const { return params.input_dim(); }
  std::size_t hidden_dim() const { return params.hidden_dim(); }
  std::size_t embed_dim() const { return params.embed_dim(); }
  std::size_t n_classes() const { return params.n_classes(); }

  bool operator==(const EmbeddingNet&) const = default;
};

/// He-normal weights (std sqrt(2 / fan_in)), zero biases.
inline EmbeddingNet init_params(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim,
                                std::size_t n_classes, std::uint64_t seed, double dropout_rate = 0.0) {
  if (input_dim == 0 || hidden_dim == 0 || embed_dim == 0 || n_classes == 0) {
    throw std::invalid_argument("init_params: dimensions must be >= 1");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("init_params: dropout_rate must be in [0,1)");
  }
  Prng rng(seed);
  const auto fill = [&rng](Mat& m) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(m.cols()));
    for (double& w : m.data()) w = rng.normal(0.0, stddev);
  };
  EmbeddingNet net;
  net.dropout_rate = dropout_rate;
  net.params.w1 = Mat(hidden_dim, input_dim);
  net.params.b1.assign(hidden_dim, 0.0);
  net.params.w2 = Mat(embed_dim, hidden_dim);
  net.params.b2.assign(embed_dim, 0.0);
  net.params.wc = Mat(n_classes, embed_dim);
  net.params.bc.assign(n_classes, 0.0);
  fill(net.params.w1);
  fill(net.params.w2);
  fill(net.params.wc);
  return net;
}

struct ForwardTrace {
  Vec x;
  Vec pre_hidden;
  /// Post-ReLU, post-dropout activations.
  Vec hidden;
  /// Dropout multipliers (0 or 1/(1-rate)); empty when dropout was not applied.
  Vec dropout_mask;
  Vec e;
  Vec f;
  Vec logits;
};

/// Inverted dropout is applied to the hidden layer only in train mode with a
/// positive rate, drawing from `rng`.
inline ForwardTrace forward(const EmbeddingNet& net, std::span<const double> x, bool train_mode,
                            Prng* rng = nullptr) {
  if (x.size() != net.input_dim()) throw std::invalid_argument("forward: input dimension mismatch");
  const auto& p = net.params;
  ForwardTrace t;
  t.x.assign(x.begin(), x.end());
  t.pre_hidden = matvec(p.w1, x);
  for (std::size_t i = 0; i < t.pre_hidden.size(); ++i) t.pre_hidden[i] += p.b1[i];
  t.hidden.resize(t.pre_hidden.size());
  for (std::size_t i = 0; i < t.hidden.size(); ++i) t.hidden[i] = t.pre_hidden[i] > 0.0 ? t.pre_hidden[i] : 0.0;

  if (train_mode && net.dropout_rate > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("forward: dropout in train mode needs a Prng");
    const double keep_scale = 1.0 / (1.0 - net.dropout_rate);
    t.dropout_mask.resize(t.hidden.size());
    for (std::size_t i = 0; i < t.hidden.size(); ++i) {
      t.dropout_mask[i] = rng->uniform() < net.dropout_rate ? 0.0 : keep_scale;
      t.hidden[i] *= t.dropout_mask[i];
    }
  }

  t.e = matvec(p.w2, t.hidden);
  for (std::size_t i = 0; i < t.e.size(); ++i) t.e[i] += p.b2[i];
  t.f = l2_normalize(t.e);
  t.logits = matvec(p.wc, t.e);
  for (std::size_t i = 0; i < t.logits.size(); ++i) t.logits[i] += p.bc[i];
  return t;
}

/// Adds the parameter gradients for one sample into `grads`. Either upstream
/// gradient may be absent; when both are given their contributions are summed
/// at the embedding.
inline void backward_accumulate(const EmbeddingNet& net, const ForwardTrace& trace,
                                std::optional<std::span<const double>> grad_f,
                                std::optional<std::span<const double>> grad_logits, ParamGrads& grads) {
  const auto& p = net.params;
  if (!grads.same_shape(p)) throw std::invalid_argument("backward: gradient buffer shape mismatch");
  if (trace.x.size() != net.input_dim() || trace.e.size() != net.embed_dim()) {
    throw std::invalid_argument("backward: trace does not match network");
  }

  Vec grad_e(net.embed_dim(), 0.0);
  if (grad_f) {
    if (grad_f->size() != net.embed_dim()) throw std::invalid_argument("backward: grad_f dimension mismatch");
    grad_e = l2_normalize_vjp(trace.e, *grad_f);
  }
  if (grad_logits) {
    if (grad_logits->size() != net.n_classes()) {
      throw std::invalid_argument("backward: grad_logits dimension mismatch");
    }
    add_outer(grads.wc, 1.0, *grad_logits, trace.e);
    axpy(1.0, *grad_logits, grads.bc);
    axpy(1.0, matvec_t(p.wc, *grad_logits), grad_e);
  }

  add_outer(grads.w2, 1.0, grad_e, trace.hidden);
  axpy(1.0, grad_e, grads.b2);

  Vec grad_pre = matvec_t(p.w2, grad_e);
  for (std::size_t i = 0; i < grad_pre.size(); ++i) {
    if (!trace.dropout_mask.empty()) grad_pre[i] *= trace.dropout_mask[i];
    if (!(trace.pre_hidden[i] > 0.0)) grad_pre[i] = 0.0;
  }
  add_outer(grads.w1, 1.0, grad_pre, trace.x);
  axpy(1.0, grad_pre, grads.b1);
}

inline ParamGrads backward(const EmbeddingNet& net, const ForwardTrace& trace,
                           std::optional<std::span<const double>> grad_f,
                           std::optional<std::span<const double>> grad_logits) {
  ParamGrads grads = net.params.zeros_like();
  backward_accumulate(net, trace, grad_f, grad_logits, grads);
  return grads;
}

struct SgdState {
  double lr = 0.1;
  double momentum = 0.9;
  NetTensors velocity;

  SgdState() = default;
  SgdState(const EmbeddingNet& net, double lr_, double momentum_)
      : lr(lr_), momentum(momentum_), velocity(net.params.zeros_like()) {}
};

/// v <- m v + g; p <- p - lr v.
inline void sgd_step(EmbeddingNet& net, const ParamGrads& grads, SgdState& state) {
  if (!grads.same_shape(net.params) || !state.velocity.same_shape(net.params)) {
    throw std::invalid_argument("sgd_step: shape mismatch");
  }
  auto params = net.params.tensors();
  const auto g = grads.tensors();
  auto v = state.velocity.tensors();
  for (std::size_t t = 0; t < kNumParamTensors; ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      v[t][i] = state.momentum * v[t][i] + g[t][i];
      params[t][i] -= state.lr * v[t][i];
    }
  }
}

}  // namespace ecn
