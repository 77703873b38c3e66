#pragma once

// Shared dense types, the error taxonomy, and the counter-based random
// number generator used for reproducible noise everywhere in the toolkit.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pathopt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// A numeric computation produced non-finite values or underflowed beyond
// recovery. Carries the offending step index when one applies.
class NumericFailure : public std::runtime_error {
 public:
  explicit NumericFailure(const std::string& what, long step = -1)
      : std::runtime_error(step >= 0 ? what + " (step " + std::to_string(step) + ")"
                                     : what),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Bad configuration or CLI input; the CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

// Deterministic stream of draws derived from a single 64-bit key.
// State advances splitmix-style; no hidden caching, so the k-th draw is a
// pure function of (key, k).
class RandomSequence {
 public:
  explicit RandomSequence(std::uint64_t key) : state_(splitmix64(key)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in the open interval (0, 1).
  double next_unit() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Standard normal via Box-Muller; two uniforms per draw, no spare kept.
  double next_gaussian() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t next_index(std::uint64_t n) { return next_u64() % n; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

 private:
  std::uint64_t state_;
};

// Counter-based Gaussian source keyed by (seed, stream, counter): every block
// of draws is a pure function of its key, so trajectories can be replayed or
// generated out of order without shared state.
class NoiseSource {
 public:
  NoiseSource() = default;
  NoiseSource(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  NoiseSource with_stream(std::uint64_t stream) const { return {seed_, stream}; }

  // Derives an independent source for a distinct purpose (same seed domain).
  NoiseSource fork(std::uint64_t tag) const { return {mix64(seed_, ~tag), stream_}; }

  RandomSequence sequence(std::uint64_t counter) const {
    return RandomSequence(mix64(mix64(seed_, stream_), counter));
  }

  Vec gaussian_vector(std::uint64_t counter, int n) const {
    RandomSequence seq = sequence(counter);
    Vec out(n);
    for (int i = 0; i < n; ++i) out[i] = seq.next_gaussian();
    return out;
  }

  Mat gaussian_matrix(std::uint64_t counter, int rows, int cols) const {
    RandomSequence seq = sequence(counter);
    Mat out(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) out(r, c) = seq.next_gaussian();
    return out;
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
};

inline double log_sum_exp(const Vec& a) {
  const double m = a.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  return m + std::log((a.array() - m).exp().sum());
}

// Max-subtracted softmax; invariant under a uniform shift of the inputs.
inline Vec softmax(const Vec& a) {
  const double m = a.maxCoeff();
  Vec w = (a.array() - m).exp();
  return w / w.sum();
}

}  // namespace pathopt
