#pragma once

// Monte-Carlo estimation of the Schrodinger-Follmer drift for a Boltzmann
// target, the sampler built on it, and a best-of-terminals optimiser.
//
// The drift at (x, t) is the ratio E[grad f(y)] / E[f(y)] over
// y = x + sqrt(1-t) Z with Z ~ N(0, I), where f is the density ratio of the
// target against N(0, I). With the Boltzmann target this is evaluated in
// log-space: log f~(y) = -V(y)/sigma + |y|^2/2 up to an additive constant
// that cancels in the softmax over samples, and grad f / f at y equals
// -grad V(y)/sigma + y.

#include "pathopt/common.hpp"
#include "pathopt/sde.hpp"
#include "pathopt/targets.hpp"

#include <bit>
#include <cmath>

namespace pathopt::mcsfp {

struct McDriftConfig {
  int samples_m = 1000;
  double sigma = 1.0;
  bool rescaled = false;

  sde::ScaleMode mode() const {
    return rescaled ? sde::ScaleMode::with_sigma(sigma) : sde::ScaleMode::standard();
  }
};

struct McDriftSample {
  Vec drift;
  Vec log_weights;  // un-normalised, max not subtracted
  Vec weights;      // softmax of log_weights, sums to 1
};

namespace detail {
// Distinct counter domain for the estimator's inner draws, keyed by t so a
// drift evaluation is a pure function of (target, x, t, cfg, source).
inline std::uint64_t draw_counter(double t) {
  return mix64(0x6d636472696674ULL, std::bit_cast<std::uint64_t>(t));
}
}  // namespace detail

inline McDriftSample mc_drift_detail(const targets::BoltzmannTarget& target, const Vec& x,
                                     double t, const McDriftConfig& cfg,
                                     const NoiseSource& noise) {
  if (!(t >= 0.0 && t < 1.0)) throw std::invalid_argument("mc_drift: t must lie in [0, 1)");
  if (cfg.samples_m < 1) throw std::invalid_argument("mc_drift: samples_m must be >= 1");
  if (cfg.sigma != target.sigma)
    throw std::invalid_argument("mc_drift: config sigma differs from the target's");
  const int n = static_cast<int>(x.size());
  const int m = cfg.samples_m;
  const double sigma = target.sigma;

  const Mat z = noise.gaussian_matrix(detail::draw_counter(t), n, m);
  const Mat y = (std::sqrt(1.0 - t) * z).colwise() + x;

  const Vec losses = target.objective.values(y);
  const Mat grads = target.objective.grads(y);

  Vec log_w(m);
  for (int j = 0; j < m; ++j) log_w[j] = -losses[j] / sigma + 0.5 * y.col(j).squaredNorm();
  if (!std::isfinite(log_w.maxCoeff()))
    throw NumericFailure("mc_drift: all sample weights underflowed");

  McDriftSample out;
  out.log_weights = log_w;
  out.weights = softmax(log_w);
  out.drift = (y - grads / sigma) * out.weights;
  return out;
}

inline Vec mc_drift(const targets::BoltzmannTarget& target, const Vec& x, double t,
                    const McDriftConfig& cfg, const NoiseSource& noise) {
  return mc_drift_detail(target, x, t, cfg, noise).drift;
}

// Full Euler-Maruyama path driven by the Monte-Carlo drift.
inline sde::Trajectory sample(const targets::BoltzmannTarget& target, const sde::TimeGrid& grid,
                              const McDriftConfig& cfg, const NoiseSource& noise) {
  const sde::DriftFn drift = [&](const Vec& x, double t) {
    return mc_drift(target, x, t, cfg, noise);
  };
  return sde::simulate(drift, grid, noise, target.objective.dim, cfg.mode());
}

struct OptimiseResult {
  Vec best_x;
  double best_loss = 0.0;
  Mat terminals;        // n x runs
  Vec terminal_losses;  // per run
};

// Runs independent trajectories (stream r for run r) and returns the argmin
// of V over terminal states; ties keep the earlier run.
inline OptimiseResult optimise(const targets::Objective& objective, double sigma, int runs,
                               const sde::TimeGrid& grid, McDriftConfig cfg,
                               std::uint64_t seed) {
  if (runs < 1) throw std::invalid_argument("optimise: runs must be >= 1");
  cfg.sigma = sigma;
  const targets::BoltzmannTarget target = targets::boltzmann(objective, sigma);
  OptimiseResult res;
  res.terminals.resize(objective.dim, runs);
  res.terminal_losses.resize(runs);
  int best = 0;
  for (int r = 0; r < runs; ++r) {
    const NoiseSource noise(seed, static_cast<std::uint64_t>(r));
    const sde::Trajectory traj = sample(target, grid, cfg, noise);
    const Vec xT = traj.terminal();
    res.terminals.col(r) = xT;
    res.terminal_losses[r] = objective.value(xT);
    if (res.terminal_losses[r] < res.terminal_losses[best]) best = r;
  }
  res.best_x = res.terminals.col(best);
  res.best_loss = res.terminal_losses[best];
  return res;
}

}  // namespace pathopt::mcsfp
