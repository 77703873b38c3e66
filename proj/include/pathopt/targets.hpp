#pragma once

// Optimisation objectives: analytic test functions, tiny-classifier losses
// over generated datasets, and the Boltzmann transformation that turns a loss
// into an unnormalised log-density.

#include "pathopt/common.hpp"
#include "pathopt/tape.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace pathopt::targets {

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Mat features;  // rows = examples, cols = input dimension
  Vec labels;
  std::vector<int> train, val, test;  // disjoint index sets covering all rows

  long count() const { return features.rows(); }
  long input_dim() const { return features.cols(); }
};

// Shuffles indices with the given seed and partitions them train/val/test.
// Fractions must be nonnegative with train+val <= 1; the remainder is test.
inline void assign_splits(Dataset& ds, double train_frac, double val_frac,
                          std::uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0)
    throw std::invalid_argument("assign_splits: fractions must be >= 0 and sum to <= 1");
  const long n = ds.count();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  RandomSequence seq(mix64(seed, 0x73706c6974ULL));
  for (long i = n - 1; i > 0; --i)
    std::swap(idx[i], idx[seq.next_index(static_cast<std::uint64_t>(i) + 1)]);
  const long n_train = static_cast<long>(train_frac * n + 0.5);
  const long n_val = static_cast<long>(val_frac * n + 0.5);
  ds.train.assign(idx.begin(), idx.begin() + std::min(n_train, n));
  ds.val.assign(idx.begin() + ds.train.size(),
                idx.begin() + std::min<long>(ds.train.size() + n_val, n));
  ds.test.assign(idx.begin() + ds.train.size() + ds.val.size(), idx.end());
}

// Two interleaving half-circle arcs with Gaussian coordinate noise.
// First half of the rows is class 0 (upper arc), second half class 1.
inline Dataset make_moons(int count, double noise_std, std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("make_moons: count must be >= 2");
  if (noise_std < 0) throw std::invalid_argument("make_moons: noise_std must be >= 0");
  const int n0 = count / 2 + count % 2;
  const int n1 = count - n0;
  Dataset ds;
  ds.features.resize(count, 2);
  ds.labels.resize(count);
  RandomSequence noise(mix64(seed, 0x6d6f6f6e73ULL));
  for (int i = 0; i < n0; ++i) {
    const double t = n0 > 1 ? M_PI * i / (n0 - 1) : 0.0;
    ds.features(i, 0) = std::cos(t) + noise_std * noise.next_gaussian();
    ds.features(i, 1) = std::sin(t) + noise_std * noise.next_gaussian();
    ds.labels[i] = 0.0;
  }
  for (int i = 0; i < n1; ++i) {
    const double t = n1 > 1 ? M_PI * i / (n1 - 1) : 0.0;
    ds.features(n0 + i, 0) = 1.0 - std::cos(t) + noise_std * noise.next_gaussian();
    ds.features(n0 + i, 1) = 0.5 - std::sin(t) + noise_std * noise.next_gaussian();
    ds.labels[n0 + i] = 1.0;
  }
  assign_splits(ds, 0.7, 0.15, seed);
  return ds;
}

// Two concentric circles; the inner radius is `factor`. Angles are evenly
// spaced per class, noise is Gaussian per coordinate.
inline Dataset make_circles(int count, double noise_std, double factor,
                            std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("make_circles: count must be >= 2");
  if (noise_std < 0) throw std::invalid_argument("make_circles: noise_std must be >= 0");
  if (!(factor > 0.0 && factor < 1.0))
    throw std::invalid_argument("make_circles: factor must lie in (0, 1)");
  const int n0 = count / 2 + count % 2;
  const int n1 = count - n0;
  Dataset ds;
  ds.features.resize(count, 2);
  ds.labels.resize(count);
  RandomSequence noise(mix64(seed, 0x636972636cULL));
  for (int i = 0; i < n0; ++i) {
    const double t = 2.0 * M_PI * i / n0;
    ds.features(i, 0) = std::cos(t) + noise_std * noise.next_gaussian();
    ds.features(i, 1) = std::sin(t) + noise_std * noise.next_gaussian();
    ds.labels[i] = 0.0;
  }
  for (int i = 0; i < n1; ++i) {
    const double t = 2.0 * M_PI * i / n1;
    ds.features(n0 + i, 0) = factor * std::cos(t) + noise_std * noise.next_gaussian();
    ds.features(n0 + i, 1) = factor * std::sin(t) + noise_std * noise.next_gaussian();
    ds.labels[n0 + i] = 1.0;
  }
  assign_splits(ds, 0.7, 0.15, seed);
  return ds;
}

// CSV layout: header "f0,...,fk,label", one example per row.
inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_csv: cannot open " + path);
  for (long j = 0; j < ds.input_dim(); ++j) out << "f" << j << ",";
  out << "label\n";
  char buf[64];
  for (long i = 0; i < ds.count(); ++i) {
    for (long j = 0; j < ds.input_dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
      out << buf << ",";
    }
    std::snprintf(buf, sizeof buf, "%.17g", ds.labels[i]);
    out << buf << "\n";
  }
}

inline Dataset load_csv(const std::string& path, double train_frac = 0.7,
                        double val_frac = 0.15, std::uint64_t split_seed = 0) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("load_csv: empty file " + path);
  const long cols = std::count(line.begin(), line.end(), ',');  // features per row
  std::vector<double> values;
  long rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    long got = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++got;
    }
    if (got != cols + 1) throw ConfigError("load_csv: ragged row in " + path);
    ++rows;
  }
  Dataset ds;
  ds.features.resize(rows, cols);
  ds.labels.resize(rows);
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) ds.features(i, j) = values[i * (cols + 1) + j];
    ds.labels[i] = values[i * (cols + 1) + cols];
  }
  assign_splits(ds, train_frac, val_frac, split_seed);
  return ds;
}

// ---------------------------------------------------------------------------
// Analytic test functions

// Shifted multimodal benchmark: V(x) = (1/n) sum_i [(x_i-B_i)^2
// - 10 cos(2 pi (x_i-B_i)) + 10]. Global minimum V(B) = 0.
inline double carrillo(const Vec& shift, const Vec& x) {
  if (x.size() != shift.size() || x.size() < 1)
    throw std::invalid_argument("carrillo: dimension mismatch");
  const Eigen::ArrayXd d = (x - shift).array();
  return (d.square() - 10.0 * (2.0 * M_PI * d).cos() + 10.0).sum() / x.size();
}

inline Vec carrillo_grad(const Vec& shift, const Vec& x) {
  if (x.size() != shift.size() || x.size() < 1)
    throw std::invalid_argument("carrillo: dimension mismatch");
  const Eigen::ArrayXd d = (x - shift).array();
  return (2.0 * d + 20.0 * M_PI * (2.0 * M_PI * d).sin()) / x.size();
}

// ---------------------------------------------------------------------------
// Objectives

enum class ObjectiveKind { analytic, model_on_dataset };

// size == 0 selects full-batch evaluation; otherwise `size` examples are
// drawn per batch index and each batch is held for `laps` evaluations.
struct BatchMode {
  int size = 0;
  int laps = 1;
};

// A parameters-to-loss function V with gradient and optional mini-batch
// support. Immutable after construction; batch selection is a pure function
// of (batch_seed, batch index), so evaluation is deterministic.
struct Objective {
  int dim = 0;
  ObjectiveKind kind = ObjectiveKind::analytic;
  BatchMode batch_mode;
  std::uint64_t batch_seed = 0;

  std::function<double(const Vec&, long)> value_at;     // (phi, batch index)
  std::function<Vec(const Vec&, long)> grad_at;
  std::function<double(const Vec&)> val_loss;           // validation-split loss
  std::function<double(const Vec&)> test_loss;
  std::function<double(const Vec&)> test_accuracy;      // empty for analytic

  double value(const Vec& phi, long batch = 0) const { return value_at(phi, batch); }
  Vec grad(const Vec& phi, long batch = 0) const { return grad_at(phi, batch); }

  // Columnwise evaluation over a matrix of points.
  Vec values(const Mat& points, long batch = 0) const {
    Vec out(points.cols());
    for (long j = 0; j < points.cols(); ++j) out[j] = value_at(points.col(j), batch);
    return out;
  }
  Mat grads(const Mat& points, long batch = 0) const {
    Mat out(points.rows(), points.cols());
    for (long j = 0; j < points.cols(); ++j) out.col(j) = grad_at(points.col(j), batch);
    return out;
  }
};

// Per-run evaluation context owning the batch cursor: batch index advances
// every `laps` ticks. Confine each cursor to a single worker.
class BatchCursor {
 public:
  explicit BatchCursor(BatchMode mode) : mode_(mode) {}
  long current() const { return mode_.size == 0 ? 0 : ticks_ / std::max(1, mode_.laps); }
  void advance() { ++ticks_; }
  long ticks() const { return ticks_; }
  // Number of distinct batches seen after k ticks.
  long distinct_after(long k) const {
    if (mode_.size == 0) return k > 0 ? 1 : 0;
    const long laps = std::max(1, mode_.laps);
    return (k + laps - 1) / laps;
  }

 private:
  BatchMode mode_;
  long ticks_ = 0;
};

inline Objective analytic_objective(int dim, std::function<double(const Vec&)> value,
                                    std::function<Vec(const Vec&)> grad) {
  Objective obj;
  obj.dim = dim;
  obj.kind = ObjectiveKind::analytic;
  obj.value_at = [value](const Vec& x, long) { return value(x); };
  obj.grad_at = [grad](const Vec& x, long) { return grad(x); };
  obj.val_loss = value;
  obj.test_loss = value;
  return obj;
}

inline Objective carrillo_objective(int dim, Vec shift) {
  if (shift.size() == 0) shift = Vec::Zero(dim);
  if (shift.size() != dim) throw std::invalid_argument("carrillo: dimension mismatch");
  return analytic_objective(
      dim, [shift](const Vec& x) { return carrillo(shift, x); },
      [shift](const Vec& x) { return carrillo_grad(shift, x); });
}

// Convex reference: V(x) = |x - center|^2 / 2.
inline Objective quadratic_objective(Vec center) {
  const int dim = static_cast<int>(center.size());
  return analytic_objective(
      dim, [center](const Vec& x) { return 0.5 * (x - center).squaredNorm(); },
      [center](const Vec& x) { return Vec(x - center); });
}

// ---------------------------------------------------------------------------
// Target classifier model (its flat parameter vector is the optimisation
// variable)

enum class Activation { tanh, relu };
enum class Loss { bce, cross_entropy };

struct TargetModel {
  std::vector<int> layer_widths;  // e.g. {2, 10, 1}
  Activation hidden = Activation::tanh;
  bool sigmoid_output = true;

  long param_count() const {
    if (layer_widths.size() < 2)
      throw std::invalid_argument("TargetModel: need at least input and output widths");
    long p = 0;
    for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l)
      p += static_cast<long>(layer_widths[l]) * layer_widths[l + 1] + layer_widths[l + 1];
    return p;
  }
};

namespace detail {

// Parameter layout: per layer, W (out x in, column-major) then b. Returns
// (W, b) Vars sliced out of the flat vector.
inline std::vector<std::pair<tape::Var, tape::Var>> layer_views(
    const tape::Var& theta, const std::vector<int>& widths) {
  std::vector<std::pair<tape::Var, tape::Var>> layers;
  long off = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const long in = widths[l], out = widths[l + 1];
    tape::Var w = tape::reshape(tape::slice_rows(theta, off, in * out), out, in);
    off += in * out;
    tape::Var b = tape::slice_rows(theta, off, out);
    off += out;
    layers.emplace_back(std::move(w), std::move(b));
  }
  return layers;
}

// Mean loss of the classifier with parameters `theta` on the given examples
// (features as columns). Labels: for bce a 1 x B row of {0,1}; for
// cross-entropy a 1 x B row of class indices.
inline tape::Var model_loss(const tape::Var& theta, const TargetModel& model,
                            const Mat& features_cols, const Vec& labels, Loss loss) {
  using namespace pathopt::tape;
  const long batch = features_cols.cols();
  auto layers = layer_views(theta, model.layer_widths);
  Var a = constant(features_cols);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Var z = broadcast_add(matmul(layers[l].first, a), layers[l].second);
    if (l + 1 < layers.size())
      a = model.hidden == Activation::tanh ? tape::tanh(z) : tape::relu(z);
    else
      a = std::move(z);
  }
  if (loss == Loss::bce) {
    if (a.rows() != 1) throw std::invalid_argument("bce needs a single output unit");
    Var p = model.sigmoid_output ? sigmoid(a) : a;
    p = clamp(p, 1e-7, 1.0 - 1e-7);
    Mat y = labels.transpose();
    Var pos = cmul(constant(y), tape::log(p));
    Var neg = cmul(constant(Mat(Mat::Ones(1, batch) - y)),
                   tape::log(sub(constant(Mat::Ones(1, batch)), p)));
    return scalar_mul(-1.0 / batch, sum(add(pos, neg)));
  }
  // Softmax cross-entropy with a detached per-column max for stability.
  const long k = a.rows();
  Mat mx = a.value.colwise().maxCoeff();
  Var shifted = sub(a, constant(Mat(mx.replicate(k, 1))));
  Var lse = tape::log(colwise_sum(tape::exp(shifted)));
  Mat onehot = Mat::Zero(k, batch);
  for (long j = 0; j < batch; ++j) {
    const long cls = static_cast<long>(labels[j]);
    if (cls < 0 || cls >= k) throw std::invalid_argument("cross_entropy: label out of range");
    onehot(cls, j) = 1.0;
  }
  Var picked = colwise_sum(cmul(constant(onehot), shifted));
  return scalar_mul(1.0 / batch, sum(sub(lse, picked)));
}

inline std::vector<int> batch_indices(const Dataset& ds, const BatchMode& mode,
                                      std::uint64_t batch_seed, long batch) {
  if (mode.size == 0 || mode.size >= static_cast<int>(ds.train.size())) return ds.train;
  std::vector<int> pool = ds.train;
  RandomSequence seq(mix64(batch_seed, static_cast<std::uint64_t>(batch)));
  for (int i = 0; i < mode.size; ++i) {
    const long j = i + static_cast<long>(seq.next_index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(mode.size);
  return pool;
}

inline Mat gather_features(const Dataset& ds, const std::vector<int>& idx) {
  Mat cols(ds.input_dim(), idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) cols.col(j) = ds.features.row(idx[j]).transpose();
  return cols;
}

inline Vec gather_labels(const Dataset& ds, const std::vector<int>& idx) {
  Vec y(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) y[j] = ds.labels[idx[j]];
  return y;
}

}  // namespace detail

// Mean classification loss of `model` run with flat parameters phi on a batch
// of the dataset; the gradient backpropagates through the model.
inline Objective model_objective(const TargetModel& model, Dataset dataset, Loss loss,
                                 BatchMode batch_mode, std::uint64_t batch_seed = 0) {
  if (model.layer_widths.empty() || model.layer_widths.front() != dataset.input_dim())
    throw std::invalid_argument("model_objective: model input width != dataset feature width");
  const long p = model.param_count();

  auto loss_on = [model, loss](const Vec& phi, const Mat& cols, const Vec& y) {
    tape::Tape t;
    tape::Var theta = t.input(phi);
    return detail::model_loss(theta, model, cols, y, loss).value(0, 0);
  };
  auto grad_on = [model, loss](const Vec& phi, const Mat& cols, const Vec& y) {
    tape::Tape t;
    tape::Var theta = t.input(phi);
    tape::Var l = detail::model_loss(theta, model, cols, y, loss);
    return Vec(t.backward(l).grad(theta));
  };
  auto batch_of = [dataset, batch_mode, batch_seed](long b) {
    return detail::batch_indices(dataset, batch_mode, batch_seed, b);
  };

  Objective obj;
  obj.dim = static_cast<int>(p);
  obj.kind = ObjectiveKind::model_on_dataset;
  obj.batch_mode = batch_mode;
  obj.batch_seed = batch_seed;
  obj.value_at = [dataset, batch_of, loss_on](const Vec& phi, long b) {
    auto idx = batch_of(b);
    return loss_on(phi, detail::gather_features(dataset, idx),
                   detail::gather_labels(dataset, idx));
  };
  obj.grad_at = [dataset, batch_of, grad_on](const Vec& phi, long b) {
    auto idx = batch_of(b);
    return grad_on(phi, detail::gather_features(dataset, idx),
                   detail::gather_labels(dataset, idx));
  };
  obj.val_loss = [dataset, loss_on](const Vec& phi) {
    return loss_on(phi, detail::gather_features(dataset, dataset.val),
                   detail::gather_labels(dataset, dataset.val));
  };
  obj.test_loss = [dataset, loss_on](const Vec& phi) {
    return loss_on(phi, detail::gather_features(dataset, dataset.test),
                   detail::gather_labels(dataset, dataset.test));
  };
  obj.test_accuracy = [dataset, model, loss](const Vec& phi) {
    const Mat cols = detail::gather_features(dataset, dataset.test);
    const Vec y = detail::gather_labels(dataset, dataset.test);
    tape::Tape t;
    tape::Var theta = t.input(phi);
    auto layers = detail::layer_views(theta, model.layer_widths);
    Mat a = cols;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Mat z = (layers[l].first.value * a).colwise() + Eigen::VectorXd(layers[l].second.value.col(0));
      if (l + 1 < layers.size())
        a = model.hidden == Activation::tanh ? Mat(z.array().tanh()) : Mat(z.cwiseMax(0.0));
      else
        a = std::move(z);
    }
    long correct = 0;
    for (long j = 0; j < a.cols(); ++j) {
      long pred;
      if (loss == Loss::bce) {
        const double pj = model.sigmoid_output ? 1.0 / (1.0 + std::exp(-a(0, j))) : a(0, j);
        pred = pj >= 0.5 ? 1 : 0;
      } else {
        a.col(j).maxCoeff(&pred);
      }
      if (pred == static_cast<long>(y[j])) ++correct;
    }
    return static_cast<double>(correct) / a.cols();
  };
  return obj;
}

// ---------------------------------------------------------------------------
// Boltzmann transformation

// Wraps an objective with temperature sigma: the unnormalised log-density is
// -V(phi)/sigma + log_scale. log_scale rescales the density by a constant
// factor; it never enters the score or any drift estimate because constant
// factors cancel in the ratio that defines them.
struct BoltzmannTarget {
  Objective objective;
  double sigma = 1.0;
  double log_scale = 0.0;

  double loss(const Vec& phi, long batch = 0) const { return objective.value(phi, batch); }
  double log_unnormalised(const Vec& phi, long batch = 0) const {
    return -loss(phi, batch) / sigma + log_scale;
  }
  Vec score(const Vec& phi, long batch = 0) const {
    return Vec(-objective.grad(phi, batch) / sigma);
  }
};

inline BoltzmannTarget boltzmann(Objective objective, double sigma) {
  if (!(sigma > 0.0 && sigma <= 1.0))
    throw std::invalid_argument("boltzmann: sigma must lie in (0, 1]");
  return BoltzmannTarget{std::move(objective), sigma, 0.0};
}

}  // namespace pathopt::targets
