#pragma once

// Time-conditioned feed-forward drift approximators. The plain variant maps
// the concatenated [state, Fourier time features] through an MLP; the
// score-guided variant adds a learned per-coordinate gate on the target score.
// Also hosts the Adam update over the flat parameter vector and the
// checkpoint format.

#include "pathopt/common.hpp"
#include "pathopt/tape.hpp"

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace pathopt::net {

enum class Variant { nn, grad };
enum class Activation { relu, tanh };

// [sin(2 pi k t), cos(2 pi k t)] for k = 1..F, interleaved; length 2F.
inline Vec time_embedding(double t, int num_frequencies) {
  Vec e(2 * num_frequencies);
  for (int k = 1; k <= num_frequencies; ++k) {
    e[2 * (k - 1)] = std::sin(2.0 * M_PI * k * t);
    e[2 * (k - 1) + 1] = std::cos(2.0 * M_PI * k * t);
  }
  return e;
}

struct DriftNetSpec {
  int dim = 2;                      // n, state dimension (also output width)
  int fourier = 8;                  // F
  std::vector<int> widths = {64, 64};
  Variant variant = Variant::nn;
  Activation activation = Activation::relu;

  int input_dim() const { return dim + 2 * fourier; }

  // Full layer list including input and output widths.
  std::vector<int> layer_widths() const {
    if (widths.empty()) throw std::invalid_argument("DriftNetSpec: hidden widths must be non-empty");
    std::vector<int> all;
    all.push_back(input_dim());
    all.insert(all.end(), widths.begin(), widths.end());
    all.push_back(dim);
    return all;
  }

  long mlp_param_count() const {
    const auto all = layer_widths();
    long p = 0;
    for (std::size_t l = 0; l + 1 < all.size(); ++l)
      p += static_cast<long>(all[l]) * all[l + 1] + all[l + 1];
    return p;
  }

  // Gate head (grad variant): linear map from the time embedding, 2F*n + n.
  long gate_param_count() const {
    return variant == Variant::grad ? static_cast<long>(2 * fourier) * dim + dim : 0;
  }

  long param_count() const { return mlp_param_count() + gate_param_count(); }
};

inline long param_count(const std::vector<int>& widths, int dim, int fourier, Variant variant) {
  DriftNetSpec spec;
  spec.dim = dim;
  spec.fourier = fourier;
  spec.widths = widths;
  spec.variant = variant;
  return spec.param_count();
}

namespace detail {

struct Layer {
  tape::Var w, b;
};

// Slices (W, b) per MLP layer plus the gate head out of the flat vector.
// Layout: per layer W (out x in, column-major) then b; gate head last.
struct NetViews {
  std::vector<Layer> layers;
  tape::Var gate_w, gate_b;  // empty for the nn variant
};

inline NetViews views(const tape::Var& theta, const DriftNetSpec& spec) {
  NetViews v;
  const auto all = spec.layer_widths();
  long off = 0;
  for (std::size_t l = 0; l + 1 < all.size(); ++l) {
    const long in = all[l], out = all[l + 1];
    tape::Var w = tape::reshape(tape::slice_rows(theta, off, in * out), out, in);
    off += in * out;
    tape::Var b = tape::slice_rows(theta, off, out);
    off += out;
    v.layers.push_back({std::move(w), std::move(b)});
  }
  if (spec.variant == Variant::grad) {
    const long f2 = 2 * spec.fourier, n = spec.dim;
    v.gate_w = tape::reshape(tape::slice_rows(theta, off, f2 * n), n, f2);
    off += f2 * n;
    v.gate_b = tape::slice_rows(theta, off, n);
  }
  return v;
}

}  // namespace detail

// Drift b(x, t) for a batch of states (columns of x). `theta` and `x` may be
// recorded Vars or constants; the score, when supplied for the grad variant,
// is treated as a fixed input and does not propagate gradients.
inline tape::Var forward_on_tape(const DriftNetSpec& spec, const tape::Var& theta,
                                 const tape::Var& x, double t, const Mat* score = nullptr) {
  using namespace pathopt::tape;
  if (x.rows() != spec.dim) throw std::invalid_argument("forward: state dimension mismatch");
  const long batch = x.cols();
  detail::NetViews v = detail::views(theta, spec);
  const Mat emb = time_embedding(t, spec.fourier).replicate(1, batch);
  Var a = concat_rows(x, constant(emb));
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    Var z = broadcast_add(matmul(v.layers[l].w, a), v.layers[l].b);
    if (l + 1 < v.layers.size())
      a = spec.activation == Activation::relu ? relu(z) : tape::tanh(z);
    else
      a = std::move(z);
  }
  if (spec.variant == Variant::grad) {
    if (score == nullptr) throw std::invalid_argument("forward: grad variant needs a score");
    if (!score->allFinite()) throw NumericFailure("forward: non-finite score");
    Var gate = broadcast_add(matmul(v.gate_w, constant(Mat(time_embedding(t, spec.fourier)))),
                             v.gate_b);
    a = add(a, cmul(replicate_cols(gate, batch), constant(*score)));
  }
  return a;
}

struct DriftNet {
  DriftNetSpec spec;
  Vec theta;

  // Hidden layers get Xavier-uniform weights from the seed; the final layer
  // and the gate head start at zero, so the initial drift is identically 0
  // and the controlled process starts as the plain Wiener process.
  static DriftNet init(const DriftNetSpec& spec, std::uint64_t seed) {
    const auto all = spec.layer_widths();
    Vec theta = Vec::Zero(spec.param_count());
    RandomSequence seq(mix64(seed, 0x696e6974ULL));
    long off = 0;
    for (std::size_t l = 0; l + 1 < all.size(); ++l) {
      const long in = all[l], out = all[l + 1];
      const bool last = l + 2 == all.size();
      if (!last) {
        const double s = std::sqrt(6.0 / (in + out));
        for (long i = 0; i < in * out; ++i) theta[off + i] = seq.next_uniform(-s, s);
      }
      off += in * out + out;  // biases stay zero
    }
    return {spec, std::move(theta)};
  }

  Mat forward_batch(const Mat& x, double t, const Mat* score = nullptr) const {
    return forward_on_tape(spec, tape::constant(Mat(theta)), tape::constant(x), t, score).value;
  }

  Vec forward(const Vec& x, double t) const { return forward_batch(x, t).col(0); }

  Vec forward(const Vec& x, double t, const Vec& score) const {
    const Mat s = score;
    return forward_batch(x, t, &s).col(0);
  }
};

// ---------------------------------------------------------------------------
// Adam over the flat parameter vector

struct AdamState {
  Vec m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr = 1e-3;

  static AdamState init(long params, double lr) {
    AdamState s;
    s.m = Vec::Zero(params);
    s.v = Vec::Zero(params);
    s.lr = lr;
    return s;
  }
};

// Global-norm clipping (when configured) happens before the moments see the
// gradient. Standard bias-corrected update.
inline void adam_step(AdamState& state, Vec& theta, Vec grad,
                      std::optional<double> clip_norm = std::nullopt) {
  if (grad.size() != theta.size() || state.m.size() != theta.size())
    throw std::invalid_argument("adam_step: size mismatch");
  if (!grad.allFinite()) throw NumericFailure("adam_step: non-finite gradient");
  if (clip_norm && *clip_norm > 0.0) {
    const double norm = grad.norm();
    if (norm > *clip_norm) grad *= *clip_norm / norm;
  }
  state.step += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  theta -= state.lr * (state.m / c1).cwiseQuotient((state.v / c2).cwiseSqrt().array().matrix()
                                                   + Vec::Constant(theta.size(), state.eps));
}

// ---------------------------------------------------------------------------
// Checkpoints: plain-text header plus one %.17g value per line; the decimal
// round-trip is bit-exact for doubles.

inline void save_checkpoint(const DriftNet& net, double sigma, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_checkpoint: cannot open " + path);
  out << "driftnet-checkpoint v1\n";
  out << "dim " << net.spec.dim << "\n";
  out << "fourier " << net.spec.fourier << "\n";
  out << "variant " << (net.spec.variant == Variant::grad ? "grad" : "nn") << "\n";
  out << "activation " << (net.spec.activation == Activation::relu ? "relu" : "tanh") << "\n";
  out << "widths";
  for (int w : net.spec.widths) out << " " << w;
  out << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", sigma);
  out << "sigma " << buf << "\n";
  out << "params " << net.theta.size() << "\n";
  for (long i = 0; i < net.theta.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", net.theta[i]);
    out << buf << "\n";
  }
}

struct Checkpoint {
  DriftNet net;
  double sigma = 1.0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_checkpoint: cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "driftnet-checkpoint v1")
    throw ConfigError("load_checkpoint: unrecognised header in " + path);
  Checkpoint cp;
  long params = -1;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "dim") ss >> cp.net.spec.dim;
    else if (key == "fourier") ss >> cp.net.spec.fourier;
    else if (key == "variant") {
      std::string v; ss >> v;
      cp.net.spec.variant = v == "grad" ? Variant::grad : Variant::nn;
    } else if (key == "activation") {
      std::string a; ss >> a;
      cp.net.spec.activation = a == "tanh" ? Activation::tanh : Activation::relu;
    } else if (key == "widths") {
      cp.net.spec.widths.clear();
      int w;
      while (ss >> w) cp.net.spec.widths.push_back(w);
    } else if (key == "sigma") ss >> cp.sigma;
    else if (key == "params") { ss >> params; break; }
    else throw ConfigError("load_checkpoint: unknown key '" + key + "'");
  }
  if (params != cp.net.spec.param_count())
    throw ConfigError("load_checkpoint: parameter count does not match the spec");
  cp.net.theta.resize(params);
  for (long i = 0; i < params; ++i) {
    if (!std::getline(in, line)) throw ConfigError("load_checkpoint: truncated file");
    cp.net.theta[i] = std::strtod(line.c_str(), nullptr);
  }
  return cp;
}

}  // namespace pathopt::net
