#pragma once

// The path-integral optimiser: the stochastic-control loss over simulated
// trajectories, trajectory-batched training of the drift network, lockstep
// annealing of temperature and learning rate, validation-argmin candidate
// selection, and diagnostic importance weights.

#include "pathopt/common.hpp"
#include "pathopt/driftnet.hpp"
#include "pathopt/sde.hpp"
#include "pathopt/tape.hpp"
#include "pathopt/targets.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace pathopt::pio {

inline constexpr std::uint64_t kTrainNoiseTag = 0x747261696eULL;
inline constexpr std::uint64_t kValNoiseTag = 0x76616cULL;

// ---------------------------------------------------------------------------
// Loss

// total = running_cost + wiener_term - target_term, where target_term is the
// unnormalised terminal log-density. The dropped normaliser only shifts the
// loss by a constant in theta.
struct PisLossBreakdown {
  double running_cost = 0.0;
  double wiener_term = 0.0;
  double target_term = 0.0;
  double total = 0.0;
};

inline PisLossBreakdown pis_loss(const sde::Trajectory& traj,
                                 const targets::BoltzmannTarget& target, long batch = 0) {
  if (traj.mode.rescaled && traj.mode.sigma != target.sigma)
    throw std::invalid_argument("pis_loss: trajectory scale sigma differs from the target's");
  PisLossBreakdown b;
  b.running_cost = traj.running_cost;
  const Vec xT = traj.terminal();
  b.wiener_term = sde::wiener_terminal_logdensity(xT, traj.mode);
  const double v = target.loss(xT, batch);
  if (!std::isfinite(v)) throw NumericFailure("pis_loss: non-finite terminal loss");
  b.target_term = -v / target.sigma + target.log_scale;
  b.total = b.running_cost + b.wiener_term - b.target_term;
  return b;
}

// ---------------------------------------------------------------------------
// Differentiable unrolled simulation
//
// States for a batch of trajectories are carried as n x B matrices; the
// gradient flows through every step of the unroll (noise increments are
// constants). For the score-guided variant the score input is detached.

struct UnrolledLoss {
  tape::Var loss;                 // scalar mean total over surviving columns
  Mat terminals;                  // n x B_alive
  Vec totals, runnings, wieners, target_terms;  // per surviving column
  std::vector<int> alive;         // original column indices that survived
  int dropped = 0;
};

namespace detail {

struct UnrollAttempt {
  bool ok = false;
  std::vector<int> dead;  // indices (within the attempted set) that went non-finite
  UnrolledLoss result;
};

inline UnrollAttempt try_unroll(tape::Tape& tp, const net::DriftNetSpec& spec,
                                const tape::Var& theta,
                                const targets::BoltzmannTarget& target,
                                const std::vector<Mat>& increments, long batch,
                                sde::ScaleMode mode, int bptt_window) {
  using namespace pathopt::tape;
  const int T = static_cast<int>(increments.size());
  const int n = spec.dim;
  const long B = increments[0].cols();
  const double dt = 1.0 / T;

  UnrollAttempt attempt;
  auto scan = [&](const Mat& m) {
    for (long j = 0; j < B; ++j)
      if (!m.col(j).allFinite()) attempt.dead.push_back(static_cast<int>(j));
    return attempt.dead.empty();
  };

  Var x = constant(Mat::Zero(n, B));
  Var cost = constant(Mat::Zero(1, B));
  for (int i = 0; i < T; ++i) {
    const double t = static_cast<double>(i) / T;
    if (bptt_window > 0 && i > 0 && i % bptt_window == 0) x = detach(x);
    Mat score;
    const Mat* score_ptr = nullptr;
    if (spec.variant == net::Variant::grad) {
      score.resize(n, B);
      for (long j = 0; j < B; ++j) score.col(j) = target.score(x.value.col(j), batch);
      score_ptr = &score;
    }
    Var b = net::forward_on_tape(spec, theta, x, t, score_ptr);
    if (!scan(b.value)) return attempt;
    cost = add(cost, colwise_sum(cmul(b, b)));
    x = add(add(x, scalar_mul(mode.drift_factor() * dt, b)),
            constant(Mat(mode.noise_factor() * increments[i])));
  }
  if (!scan(x.value)) return attempt;

  Var running = scalar_mul(1.0 / (2.0 * T), cost);
  const double wvar = mode.wiener_variance();
  Var colsq = colwise_sum(cmul(x, x));
  Var wiener = add(scalar_mul(-0.5 / wvar, colsq),
                   constant(Mat::Constant(1, B, -0.5 * n * std::log(2.0 * M_PI * wvar))));
  ScalarField field{
      [&target, batch](const Vec& p) {
        return p.allFinite() ? target.loss(p, batch)
                             : std::numeric_limits<double>::quiet_NaN();
      },
      [&target, batch, n](const Vec& p) {
        return p.allFinite() ? Vec(target.objective.grad(p, batch)) : Vec(Vec::Zero(n));
      }};
  Var losses = colwise_apply(x, field);
  if (!losses.value.allFinite()) {
    for (long j = 0; j < B; ++j)
      if (!std::isfinite(losses.value(0, j))) attempt.dead.push_back(static_cast<int>(j));
    return attempt;
  }
  Var target_term = add(scalar_mul(-1.0 / target.sigma, losses),
                        constant(Mat::Constant(1, B, target.log_scale)));
  Var total = sub(add(running, wiener), target_term);

  attempt.ok = true;
  attempt.result.loss = scalar_mul(1.0 / B, sum(total));
  attempt.result.terminals = x.value;
  attempt.result.totals = total.value.row(0);
  attempt.result.runnings = running.value.row(0);
  attempt.result.wieners = wiener.value.row(0);
  attempt.result.target_terms = target_term.value.row(0);
  return attempt;
}

}  // namespace detail

// Builds the mean trajectory loss over a batch of paths, recording onto the
// tape when `theta` is a recorded Var. Columns whose path goes non-finite are
// dropped and the unroll is rebuilt from the survivors (a poisoned column
// would otherwise contaminate every gradient); if none survive the whole
// step fails.
inline UnrolledLoss unrolled_loss(tape::Tape& tp, const net::DriftNetSpec& spec,
                                  const tape::Var& theta,
                                  const targets::BoltzmannTarget& target,
                                  const std::vector<Mat>& increments, long batch,
                                  sde::ScaleMode mode, int bptt_window = 0) {
  if (increments.empty()) throw std::invalid_argument("unrolled_loss: need at least one step");
  const long B = increments[0].cols();
  std::vector<int> alive(B);
  for (long j = 0; j < B; ++j) alive[j] = static_cast<int>(j);

  std::vector<Mat> current = increments;
  while (true) {
    detail::UnrollAttempt attempt =
        detail::try_unroll(tp, spec, theta, target, current, batch, mode, bptt_window);
    if (attempt.ok) {
      attempt.result.alive = alive;
      attempt.result.dropped = static_cast<int>(B - alive.size());
      return attempt.result;
    }
    std::vector<int> keep;
    std::vector<bool> dead(current[0].cols(), false);
    for (int d : attempt.dead) dead[d] = true;
    for (long j = 0; j < current[0].cols(); ++j)
      if (!dead[j]) keep.push_back(static_cast<int>(j));
    if (keep.empty())
      throw NumericFailure("unrolled_loss: every trajectory went non-finite",
                           alive.empty() ? -1 : alive.front());
    std::vector<int> next_alive;
    for (int k : keep) next_alive.push_back(alive[k]);
    std::vector<Mat> filtered;
    for (const Mat& m : current) {
      Mat f(m.rows(), static_cast<long>(keep.size()));
      for (std::size_t c = 0; c < keep.size(); ++c) f.col(c) = m.col(keep[c]);
      filtered.push_back(std::move(f));
    }
    alive = std::move(next_alive);
    current = std::move(filtered);
    tp.reset();
  }
}

// ---------------------------------------------------------------------------
// Plateau-driven lockstep annealing of learning rate and temperature

struct PlateauConfig {
  double rel_improvement = 1e-3;
  int patience = 10;
  double factor = 0.5;
  double sigma_floor = 1e-4;
};

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  int since = 0;
  long events = 0;

  // Returns true when a plateau fires; the caller applies the factor.
  bool observe(double loss, const PlateauConfig& cfg) {
    if (loss < best - cfg.rel_improvement * std::max(std::abs(best), 1e-12)) {
      best = loss;
      since = 0;
      return false;
    }
    if (++since >= cfg.patience) {
      since = 0;
      ++events;
      return true;
    }
    return false;
  }
};

// Replays a loss history: every plateau multiplies lr and sigma by the
// factor, with sigma floored.
inline std::pair<double, double> anneal_on_plateau(const std::vector<double>& history,
                                                   const PlateauConfig& cfg, double lr0,
                                                   double sigma0) {
  if (cfg.patience < 1) throw std::invalid_argument("anneal_on_plateau: patience must be >= 1");
  if (!(cfg.factor > 0.0 && cfg.factor < 1.0))
    throw std::invalid_argument("anneal_on_plateau: factor must lie in (0, 1)");
  PlateauState st;
  double lr = lr0, sigma = sigma0;
  for (double h : history)
    if (st.observe(h, cfg)) {
      lr *= cfg.factor;
      sigma = std::max(sigma * cfg.factor, cfg.sigma_floor);
    }
  return {lr, sigma};
}

// ---------------------------------------------------------------------------
// Importance weights (diagnostic; never used for selection)

// Girsanov ratio between the controlled path measure and the uncontrolled
// one, times the terminal density ratio. Returned in log-space.
inline double importance_log_weight(const sde::Trajectory& traj,
                                    const targets::BoltzmannTarget& target, long batch = 0) {
  if (traj.mode.rescaled && traj.mode.sigma != target.sigma)
    throw std::invalid_argument("importance_log_weight: scale sigma differs from the target's");
  const double dot = traj.drifts.cwiseProduct(traj.noise).sum();
  const Vec xT = traj.terminal();
  const double terminal_ratio =
      target.log_unnormalised(xT, batch) - sde::wiener_terminal_logdensity(xT, traj.mode);
  if (!traj.mode.rescaled) return -dot - traj.running_cost + terminal_ratio;
  const double s = traj.mode.sigma;
  return -std::sqrt(s) * dot - s * traj.running_cost + terminal_ratio;
}

// Self-normalised weights from log-weights, computed via log-sum-exp.
inline Vec normalised_weights(const Vec& log_weights) {
  return softmax(log_weights);
}

// ---------------------------------------------------------------------------
// Validation-argmin candidate selection

struct Candidate {
  Vec phi;
  double val_loss = 0.0;
  double log_weight = 0.0;
  double weight = 0.0;
};

struct CandidateSet {
  std::vector<Candidate> items;
  int best = -1;

  const Vec& best_phi() const { return items.at(best).phi; }

  // Optional weighted-ensemble report.
  Vec weighted_mean() const {
    Vec acc = Vec::Zero(items.front().phi.size());
    for (const Candidate& c : items) acc += c.weight * c.phi;
    return acc;
  }
};

// Simulates M fresh trajectories under the fixed network and returns every
// terminal with its validation loss; selection is the argmin (ties keep the
// earlier trajectory).
inline CandidateSet validate_select(const net::DriftNet& net, const targets::Objective& objective,
                                    double sigma, bool rescaled, int steps, int M,
                                    const NoiseSource& noise) {
  if (M < 1) throw std::invalid_argument("validate_select: M must be >= 1");
  const targets::BoltzmannTarget target = targets::boltzmann(objective, sigma);
  const sde::ScaleMode mode =
      rescaled ? sde::ScaleMode::with_sigma(sigma) : sde::ScaleMode::standard();
  const sde::TimeGrid grid(steps);
  const bool guided = net.spec.variant == net::Variant::grad;
  const sde::DriftFn drift = [&](const Vec& x, double t) {
    return guided ? net.forward(x, t, target.score(x)) : net.forward(x, t);
  };
  CandidateSet set;
  Vec log_w(M);
  for (int k = 0; k < M; ++k) {
    const sde::Trajectory traj =
        sde::simulate(drift, grid, noise.with_stream(noise.stream() + k), objective.dim, mode);
    Candidate c;
    c.phi = traj.terminal();
    c.val_loss = objective.val_loss ? objective.val_loss(c.phi) : objective.value(c.phi);
    c.log_weight = importance_log_weight(traj, target);
    log_w[k] = c.log_weight;
    set.items.push_back(std::move(c));
    if (set.best < 0 || set.items[k].val_loss < set.items[set.best].val_loss) set.best = k;
  }
  const Vec w = normalised_weights(log_w);
  for (int k = 0; k < M; ++k) set.items[k].weight = w[k];
  return set;
}

// ---------------------------------------------------------------------------
// Trainer

struct PioConfig {
  int traj_batch = 32;
  int steps = 32;  // T
  double lr = 1e-2;
  std::optional<double> grad_clip;
  double sigma0 = 1.0;
  PlateauConfig plateau;
  int batch_laps = 0;  // 0: use the objective's own laps setting
  bool rescaled = false;
  int val_trajectories = 16;
  int max_steps = 500;
  int bptt_window = 0;  // 0: full backpropagation through the unroll
  std::uint64_t seed = 0;

  std::vector<int> net_widths = {64, 64};
  int fourier = 8;
  net::Variant variant = net::Variant::nn;
  net::Activation activation = net::Activation::relu;

  void validate() const {
    if (traj_batch < 1) throw std::invalid_argument("pio: traj_batch must be >= 1");
    if (steps < 1) throw std::invalid_argument("pio: steps must be >= 1");
    if (!(sigma0 > 0.0 && sigma0 <= 1.0))
      throw std::invalid_argument("pio: sigma must lie in (0, 1]");
    if (!(plateau.factor > 0.0 && plateau.factor < 1.0))
      throw std::invalid_argument("pio: anneal factor must lie in (0, 1)");
  }

  net::DriftNetSpec net_spec(int dim) const {
    net::DriftNetSpec s;
    s.dim = dim;
    s.fourier = fourier;
    s.widths = net_widths;
    s.variant = variant;
    s.activation = activation;
    return s;
  }

  sde::ScaleMode mode(double sigma) const {
    return rescaled ? sde::ScaleMode::with_sigma(sigma) : sde::ScaleMode::standard();
  }
};

struct StepResult {
  double mean_total = 0.0;
  double mean_running = 0.0;
  double mean_wiener = 0.0;
  double mean_target = 0.0;
  double grad_norm = 0.0;
  int dropped = 0;
  bool annealed = false;
};

class Trainer {
 public:
  Trainer(targets::Objective objective, PioConfig cfg)
      : obj_(std::move(objective)),
        cfg_(std::move(cfg)),
        net_(net::DriftNet::init(cfg_.net_spec(obj_.dim), cfg_.seed)),
        adam_(net::AdamState::init(net_.theta.size(), cfg_.lr)),
        sigma_(cfg_.sigma0),
        cursor_({obj_.batch_mode.size,
                 cfg_.batch_laps > 0 ? cfg_.batch_laps : obj_.batch_mode.laps}) {
    cfg_.validate();
  }

  // One training step: simulate a trajectory batch with recording, average
  // the per-path losses, backpropagate, Adam-update theta, and feed the
  // plateau scheduler. The whole batch shares one data mini-batch.
  StepResult step() {
    const long batch = cursor_.current();
    cursor_.advance();
    const targets::BoltzmannTarget target{obj_, sigma_, 0.0};
    const std::vector<Mat> increments = draw_increments(step_);

    tape::Tape tp;
    tape::Var theta = tp.input(net_.theta);
    UnrolledLoss u = unrolled_loss(tp, net_.spec, theta, target, increments, batch,
                                   cfg_.mode(sigma_), cfg_.bptt_window);
    const Vec grad = tp.backward(u.loss).grad(theta);

    StepResult r;
    r.mean_total = u.totals.mean();
    r.mean_running = u.runnings.mean();
    r.mean_wiener = u.wieners.mean();
    r.mean_target = u.target_terms.mean();
    r.grad_norm = grad.norm();
    r.dropped = u.dropped;

    net::adam_step(adam_, net_.theta, grad, cfg_.grad_clip);
    if (plateau_.observe(r.mean_total, cfg_.plateau)) {
      adam_.lr *= cfg_.plateau.factor;
      sigma_ = std::max(sigma_ * cfg_.plateau.factor, cfg_.plateau.sigma_floor);
      r.annealed = true;
    }
    ++step_;
    return r;
  }

  CandidateSet validate(int M) const {
    return validate_select(net_, obj_, sigma_, cfg_.rescaled, cfg_.steps, M,
                           NoiseSource(cfg_.seed, 0).fork(kValNoiseTag));
  }

  CandidateSet validate(int M, std::uint64_t stream_base) const {
    return validate_select(net_, obj_, sigma_, cfg_.rescaled, cfg_.steps, M,
                           NoiseSource(cfg_.seed, stream_base).fork(kValNoiseTag));
  }

  const net::DriftNet& net() const { return net_; }
  net::DriftNet& net() { return net_; }
  const targets::Objective& objective() const { return obj_; }
  const PioConfig& config() const { return cfg_; }
  double sigma() const { return sigma_; }
  double lr() const { return adam_.lr; }
  long steps_taken() const { return step_; }
  long plateau_events() const { return plateau_.events; }
  long current_batch() const { return cursor_.current(); }

  // Raw Wiener increments for training step s: one n x B matrix per time
  // step, column j drawn from stream s * B + j.
  std::vector<Mat> draw_increments(long s) const {
    const int T = cfg_.steps, n = obj_.dim, B = cfg_.traj_batch;
    const double scale = std::sqrt(1.0 / T);
    const NoiseSource base = NoiseSource(cfg_.seed, 0).fork(kTrainNoiseTag);
    std::vector<Mat> inc(T, Mat(n, B));
    for (int j = 0; j < B; ++j) {
      const NoiseSource src = base.with_stream(static_cast<std::uint64_t>(s) * B + j);
      for (int i = 0; i < T; ++i) inc[i].col(j) = scale * src.gaussian_vector(i, n);
    }
    return inc;
  }

 private:
  targets::Objective obj_;
  PioConfig cfg_;
  net::DriftNet net_;
  net::AdamState adam_;
  double sigma_;
  PlateauState plateau_;
  targets::BatchCursor cursor_;
  long step_ = 0;
};

}  // namespace pathopt::pio
