#pragma once

// Deterministic primitive math shared by every other ecn header: the seeded
// generator, dense vector/matrix storage, temperature softmax, L2
// normalization and its vector-Jacobian product, and a central-difference
// gradient used by the test suites.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ecn {

using Vec = std::vector<double>;

inline constexpr double kDefaultEps = 1e-12;

/// Raised when a computation would produce a non-finite value or needs a
/// direction that does not exist (normalizing a zero vector for a gradient).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

// ---------------------------------------------------------------------------
// Prng

/// xoshiro256** seeded through splitmix64. The raw 64-bit stream is fully
/// specified by the seed and identical on every platform. Do not change the
/// algorithm without bumping the checkpoint format version.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
    has_spare_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Lemire's nearly-divisionless rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Prng::below: empty range");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Vector kernels

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

/// y = M x
inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (x.size() != m.cols()) throw std::invalid_argument("matvec: dimension mismatch");
  Vec y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

/// y = M^T x
inline Vec matvec_t(const Mat& m, std::span<const double> x) {
  if (x.size() != m.rows()) throw std::invalid_argument("matvec_t: dimension mismatch");
  Vec y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(x[r], m.row(r), y);
  return y;
}

/// M += a * u v^T
inline void add_outer(Mat& m, double a, std::span<const double> u, std::span<const double> v) {
  if (u.size() != m.rows() || v.size() != m.cols()) {
    throw std::invalid_argument("add_outer: dimension mismatch");
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (u[r] != 0.0) axpy(a * u[r], v, m.row(r));
  }
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Normalization

/// v / ||v||, or the zero vector when ||v|| < eps. Zero keys in a fresh
/// memory rely on the degenerate branch.
inline Vec l2_normalize(std::span<const double> v, double eps = kDefaultEps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize: eps must be positive");
  const double n = norm2(v);
  Vec out(v.size(), 0.0);
  if (n < eps) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

/// Gradient of l2_normalize at v applied to `upstream`:
/// (I - v_hat v_hat^T) upstream / ||v||.
inline Vec l2_normalize_vjp(std::span<const double> v, std::span<const double> upstream,
                            double eps = kDefaultEps) {
  if (v.size() != upstream.size()) {
    throw std::invalid_argument("l2_normalize_vjp: length mismatch");
  }
  const double n = norm2(v);
  if (n < eps) throw NumericError("l2_normalize_vjp: degenerate norm");
  Vec out(v.size());
  double radial = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) radial += (v[i] / n) * upstream[i];
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (upstream[i] - radial * (v[i] / n)) / n;
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family

/// log-sum-exp with max subtraction.
namespace detail {
// Max of s and log(sum_i exp(s_i - max)), the latter via log1p over the
// non-max terms so it keeps precision when they are tiny.
inline std::pair<double, double> shifted_lse(std::span<const double> s) {
  const auto top = std::max_element(s.begin(), s.end());
  double acc = 0.0;
  for (auto it = s.begin(); it != s.end(); ++it) {
    if (it != top) acc += std::exp(*it - *top);
  }
  return {*top, std::log1p(acc)};
}
}  // namespace detail

inline double log_sum_exp(std::span<const double> s) {
  if (s.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  const auto [mx, rest] = detail::shifted_lse(s);
  return mx + rest;
}

inline Vec log_softmax(std::span<const double> s) {
  if (s.empty()) throw std::invalid_argument("log_softmax: empty input");
  const auto [mx, rest] = detail::shifted_lse(s);
  Vec out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mx) - rest;
  return out;
}

/// p_j = exp(s_j / beta) / sum_l exp(s_l / beta).
inline Vec softmax_temp(std::span<const double> scores, double beta = 1.0) {
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("softmax_temp: beta must be in (0,1]");
  if (scores.empty()) throw std::invalid_argument("softmax_temp: empty input");
  const double mx = *std::max_element(scores.begin(), scores.end());
  Vec p(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp((scores[i] - mx) / beta);
    total += p[i];
  }
  for (double& x : p) {
    x /= total;
    // exp underflow would otherwise give exact zeros for very peaked inputs
    x = std::max(x, std::numeric_limits<double>::min());
  }
  return p;
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Test oracle

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline Vec finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                            std::span<const double> x, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Vec probe(x.begin(), x.end());
  Vec grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// ||a - b|| / max(||a|| + ||b||, floor): the symmetric relative error used by
/// gradient checks.
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-8) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(diff) / std::max(norm2(a) + norm2(b), floor);
}

}  // namespace ecn
