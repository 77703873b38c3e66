#pragma once

// Uniform time grids, Euler-Maruyama simulation of drift-controlled
// diffusions on [0, 1], and the Wiener terminal log-density. Two dynamics are
// supported: the standard update X_{i+1} = X_i + b dt + dW and the
// temperature-rescaled update X_{i+1} = X_i + sigma b dt + sqrt(sigma) dW.

#include "pathopt/common.hpp"

#include <functional>
#include <ostream>

namespace pathopt::sde {

struct TimeGrid {
  int steps;

  explicit TimeGrid(int T) : steps(T) {
    if (T < 1) throw std::invalid_argument("TimeGrid: steps must be >= 1");
  }
  double dt() const { return 1.0 / steps; }
  double time(int i) const { return static_cast<double>(i) / steps; }
};

struct ScaleMode {
  bool rescaled = false;
  double sigma = 1.0;

  static ScaleMode standard() { return {false, 1.0}; }
  static ScaleMode with_sigma(double sigma) {
    if (!(sigma > 0.0 && sigma <= 1.0))
      throw std::invalid_argument("ScaleMode: sigma must lie in (0, 1]");
    return {true, sigma};
  }

  double drift_factor() const { return rescaled ? sigma : 1.0; }
  double noise_factor() const { return rescaled ? std::sqrt(sigma) : 1.0; }
  // Variance of the uncontrolled terminal law (per coordinate).
  double wiener_variance() const { return rescaled ? sigma : 1.0; }
};

// One discretised path started from the Dirac at the origin. Rows index time.
struct Trajectory {
  Mat states;  // (T+1) x n
  Mat noise;   // T x n, raw Wiener increments of variance 1/T per coordinate
  Mat drifts;  // T x n
  double running_cost = 0.0;  // sum_i |b_i|^2 / (2T)
  ScaleMode mode;

  int steps() const { return static_cast<int>(drifts.rows()); }
  int dim() const { return static_cast<int>(drifts.cols()); }
  Vec terminal() const { return states.row(states.rows() - 1).transpose(); }
};

using DriftFn = std::function<Vec(const Vec&, double)>;

// Simulates against externally supplied increments (T x n). Useful for
// forcing specific noise in tests; the seeded overload below delegates here.
inline Trajectory simulate(const DriftFn& drift, const TimeGrid& grid, const Mat& increments,
                           ScaleMode mode = ScaleMode::standard()) {
  const int T = grid.steps;
  if (increments.rows() != T)
    throw std::invalid_argument("simulate: increments must have one row per step");
  const int n = static_cast<int>(increments.cols());
  Trajectory traj;
  traj.mode = mode;
  traj.states = Mat::Zero(T + 1, n);
  traj.noise = increments;
  traj.drifts.resize(T, n);
  const double dt = grid.dt();
  Vec x = Vec::Zero(n);
  double cost = 0.0;
  for (int i = 0; i < T; ++i) {
    Vec b = drift(x, grid.time(i));
    if (b.size() != n) throw std::invalid_argument("simulate: drift returned wrong dimension");
    if (!b.allFinite()) throw NumericFailure("simulate: drift produced non-finite values", i);
    traj.drifts.row(i) = b.transpose();
    cost += b.squaredNorm();
    x += mode.drift_factor() * dt * b + mode.noise_factor() * increments.row(i).transpose();
    traj.states.row(i + 1) = x.transpose();
  }
  traj.running_cost = cost / (2.0 * T);
  return traj;
}

// Draws the T increments (variance 1/T per coordinate) from the counter-based
// source: step i uses counter i, so paths replay bit-identically.
inline Mat wiener_increments(const NoiseSource& noise, const TimeGrid& grid, int dim) {
  Mat dw(grid.steps, dim);
  const double scale = std::sqrt(grid.dt());
  for (int i = 0; i < grid.steps; ++i)
    dw.row(i) = scale * noise.gaussian_vector(i, dim).transpose();
  return dw;
}

inline Trajectory simulate(const DriftFn& drift, const TimeGrid& grid, const NoiseSource& noise,
                           int dim, ScaleMode mode = ScaleMode::standard()) {
  return simulate(drift, grid, wiener_increments(noise, grid, dim), mode);
}

// log N(x; 0, v I) where v is the mode's terminal Wiener variance.
inline double wiener_terminal_logdensity(const Vec& x, ScaleMode mode = ScaleMode::standard()) {
  if (!x.allFinite()) throw NumericFailure("wiener_terminal_logdensity: non-finite input");
  const double v = mode.wiener_variance();
  const double n = static_cast<double>(x.size());
  return -0.5 * n * std::log(2.0 * M_PI * v) - x.squaredNorm() / (2.0 * v);
}

// Debug dump: "step,t,x0..xk,b0..bk,dW0..dWk". The terminal row carries the
// final state with zero drift/noise columns.
inline void dump_trajectory_csv(const Trajectory& traj, const TimeGrid& grid,
                                std::ostream& out) {
  const int T = traj.steps(), n = traj.dim();
  out << "step,t";
  for (int j = 0; j < n; ++j) out << ",x" << j;
  for (int j = 0; j < n; ++j) out << ",b" << j;
  for (int j = 0; j < n; ++j) out << ",dW" << j;
  out << "\n";
  char buf[64];
  auto emit = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << "," << buf;
  };
  for (int i = 0; i <= T; ++i) {
    out << i;
    emit(grid.time(i));
    for (int j = 0; j < n; ++j) emit(traj.states(i, j));
    for (int j = 0; j < n; ++j) emit(i < T ? traj.drifts(i, j) : 0.0);
    for (int j = 0; j < n; ++j) emit(i < T ? traj.noise(i, j) : 0.0);
    out << "\n";
  }
}

}  // namespace pathopt::sde
