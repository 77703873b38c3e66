#pragma once

// Executable form of the optimiser's guarantee: the three-term failure
// probability bound for the discretised neural process and the closed-form
// parameter solvers that hold the bound below sqrt(delta).
//
// The constants C_tau_eps_n and C_lprime are existential in the underlying
// theory and are taken as user inputs (default 1); every output is
// conditional on the supplied values.

#include "pathopt/common.hpp"

#include <cmath>
#include <string>

namespace pathopt::bounds {

struct Splits {
  double c1 = 1.0 / 3.0, c2 = 1.0 / 3.0, c3 = 1.0 / 3.0;
};

struct BoundConstants {
  double c_tau_eps_n = 1.0;  // constant of the sampling term
  double c_lprime = 0.0;     // constant of the discretisation term
  double lprime = 1.0;       // Lipschitz constant of the drift network
  double lipschitz = 1.0;    // L: Lipschitz constant of the density ratio and its gradient
  double c_min = 1.0;        // lower bound on the density ratio, in (0, 1]
  double radius = 1.0;       // R: radius of the ball outside which V is quadratic
  double tau = 1.0;          // target loss level
  double eps = 0.5;          // slack, in (0, tau)
  Splits splits;

  void validate() const {
    if (!(radius > 0.0))
      throw std::invalid_argument("violates Assumption A.1: ball radius R must be positive");
    if (!(lipschitz > 0.0))
      throw std::invalid_argument("violates Assumption A.2: Lipschitz constant L must be positive");
    if (!(c_min > 0.0 && c_min <= 1.0))
      throw std::invalid_argument("violates Assumption A.2: density lower bound c must lie in (0, 1]");
    if (!(lprime > 0.0))
      throw std::invalid_argument("violates Assumption A.4: drift Lipschitz constant L' must be positive");
    if (!(c_lprime >= 0.0))
      throw std::invalid_argument("violates Assumption A.4: discretisation constant must be >= 0");
    if (!(tau > 0.0 && eps > 0.0 && eps < tau))
      throw std::invalid_argument("bound parameters: eps must lie in (0, tau)");
    if (!(c_tau_eps_n > 0.0))
      throw std::invalid_argument("bound parameters: C_tau_eps_n must be positive");
    if (!(splits.c1 > 0.0 && splits.c2 > 0.0 && splits.c3 > 0.0) ||
        std::abs(splits.c1 + splits.c2 + splits.c3 - 1.0) > 1e-12)
      throw std::invalid_argument("bound parameters: splits must be positive and sum to 1");
  }

  double eps_hat_cap() const { return 16.0 * lipschitz * lipschitz / (c_min * c_min); }
};

struct BoundBreakdown {
  double sampling_term = 0.0;        // decays as exp(-(tau-eps)/sigma)
  double approx_term = 0.0;          // sqrt(2 eps_hat)
  double discretisation_term = 0.0;  // sqrt(4 L'^2 (C/T + 1/T^2))

  double total() const { return sampling_term + approx_term + discretisation_term; }
};

inline BoundBreakdown failure_bound(const BoundConstants& k, double sigma, double eps_hat,
                                    long T) {
  k.validate();
  if (!(sigma > 0.0 && sigma < 1.0))
    throw std::invalid_argument("failure_bound: sigma must lie in the open interval (0, 1)");
  if (!(eps_hat > 0.0 && eps_hat < k.eps_hat_cap()))
    throw std::invalid_argument("failure_bound: eps_hat must lie in (0, 16 L^2 / c^2)");
  if (T < 1) throw std::invalid_argument("failure_bound: T must be >= 1");
  BoundBreakdown b;
  b.sampling_term = k.c_tau_eps_n * std::exp(-(k.tau - k.eps) / sigma);
  b.approx_term = std::sqrt(2.0 * eps_hat);
  const double Td = static_cast<double>(T);
  b.discretisation_term =
      std::sqrt(4.0 * k.lprime * k.lprime * (k.c_lprime / Td + 1.0 / (Td * Td)));
  return b;
}

// Largest sigma keeping the sampling term within C1 sqrt(delta):
// sigma <= -2 (tau - eps) / ln((C1^2 / C^2) delta). Requires the log
// argument below 1.
inline double solve_sigma(const BoundConstants& k, double delta) {
  k.validate();
  if (!(delta > 0.0)) throw std::invalid_argument("solve_sigma: delta must be positive");
  const double ratio = (k.splits.c1 * k.splits.c1) / (k.c_tau_eps_n * k.c_tau_eps_n) * delta;
  if (ratio >= 1.0)
    throw std::invalid_argument("solve_sigma: delta too large for the given constants");
  return -2.0 * (k.tau - k.eps) / std::log(ratio);
}

// Largest neural-approximation error keeping its term within C2 sqrt(delta).
inline double solve_epshat(const BoundConstants& k, double delta) {
  k.validate();
  if (!(delta > 0.0)) throw std::invalid_argument("solve_epshat: delta must be positive");
  return k.splits.c2 * k.splits.c2 * delta / 2.0;
}

// Smallest step count keeping the discretisation term within C3 sqrt(delta).
// The budget 4 L'^2 (C/T + 1/T^2) <= C3^2 delta is quadratic in 1/T; the
// exact positive root is used, so the returned T satisfies the budget for
// every C >= 0 (for C = 0 it equals ceil(2 L' / (C3 sqrt(delta)))).
inline long solve_T(const BoundConstants& k, double delta) {
  k.validate();
  if (!(delta > 0.0)) throw std::invalid_argument("solve_T: delta must be positive");
  const double q = k.splits.c3 * k.splits.c3 * delta / (4.0 * k.lprime * k.lprime);
  // 1/T <= 2q / (C + sqrt(C^2 + 4q)); this form avoids cancellation.
  const double t_real =
      (k.c_lprime + std::sqrt(k.c_lprime * k.c_lprime + 4.0 * q)) / (2.0 * q);
  const double snapped = std::round(t_real);
  const double chosen =
      std::abs(t_real - snapped) <= 1e-9 * std::max(1.0, t_real) ? snapped : std::ceil(t_real);
  return std::max(1L, static_cast<long>(chosen));
}

struct CorollaryReport {
  double delta = 0.0;
  double sigma = 0.0;
  double eps_hat = 0.0;
  long T = 0;
  BoundBreakdown at_solution;
  double budget = 0.0;  // sqrt(delta)
  bool ok = false;
};

// Plugs the three solved parameters back into the bound and checks the
// guarantee total <= sqrt(delta) (machine tolerance). A failure here means an
// implementation bug, not a modelling gap.
inline CorollaryReport verify_corollary(const BoundConstants& k, double delta) {
  CorollaryReport r;
  r.delta = delta;
  r.sigma = solve_sigma(k, delta);
  if (!(r.sigma < 1.0))
    throw std::invalid_argument(
        "verify_corollary: solved sigma is not below 1; delta is too large for the constants");
  r.eps_hat = solve_epshat(k, delta);
  r.T = solve_T(k, delta);
  r.at_solution = failure_bound(k, r.sigma, r.eps_hat, r.T);
  r.budget = std::sqrt(delta);
  r.ok = r.at_solution.total() <= r.budget + 1e-12;
  if (!r.ok)
    throw std::logic_error("verify_corollary: bound exceeds sqrt(delta) at the solved parameters");
  return r;
}

}  // namespace pathopt::bounds
