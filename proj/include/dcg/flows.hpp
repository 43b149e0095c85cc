#pragma once

// Normalizing causal flow: a conditional deep sigmoidal flow that maps a
// node's (normalized) value to its exogenous noise. The conditioner network
// reads the encoded parents and emits, for every layer, K triples of
// pre-activations (a_hat, b, w_hat). A layer computes
//
//   y = logit( sum_k w_k * sigmoid(a_k * x + b_k) ),
//   a_k = softplus(a_hat_k) + 1e-4,  w = softmax(w_hat)
//
// which is strictly increasing in x. The inner sum is clamped to
// [1e-7, 1 - 1e-7]. All evaluation is done in log space.

#include "dcg/units.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr double kDsfMinA = 1e-4;
inline constexpr double kDsfClamp = 1e-7;

class FlowStabilityError : public std::runtime_error {
 public:
  FlowStabilityError(int layer, const std::string& what)
      : std::runtime_error("flow layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  [[nodiscard]] int layer() const { return layer_; }

 private:
  int layer_;
};

class InversionRangeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FlowEvaluation {
  double eps = 0.0;
  double logdet = 0.0;
};

// View over the raw conditioner output of one sample: layers * 3K values laid
// out per layer as [a_hat(K), b(K), w_hat(K)].
struct DSFParams {
  std::span<const double> raw;
  int layers = 1;
  int units = 1;

  [[nodiscard]] std::span<const double> a_hat(int l) const { return block(l, 0); }
  [[nodiscard]] std::span<const double> b(int l) const { return block(l, 1); }
  [[nodiscard]] std::span<const double> w_hat(int l) const { return block(l, 2); }

 private:
  [[nodiscard]] std::span<const double> block(int l, int which) const {
    return raw.subspan(static_cast<std::size_t>((3 * l + which) * units),
                       static_cast<std::size_t>(units));
  }
};

namespace detail {

inline double logsumexp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

// One layer: returns (y, log dy/dx).
inline FlowEvaluation dsf_layer(double x, std::span<const double> a_hat,
                                std::span<const double> b, std::span<const double> w_hat) {
  const std::size_t k = a_hat.size();
  thread_local std::vector<double> logw, t_s, t_1ms, t_d;
  logw.resize(k);
  t_s.resize(k);
  t_1ms.resize(k);
  t_d.resize(k);
  const double lse_w = logsumexp(w_hat);
  for (std::size_t i = 0; i < k; ++i) {
    logw[i] = w_hat[i] - lse_w;
    const double a = detail::softplus(a_hat[i]) + kDsfMinA;
    const double pre = a * x + b[i];
    const double ls = detail::log_sigmoid(pre);
    const double lns = detail::log_sigmoid(-pre);
    t_s[i] = logw[i] + ls;
    t_1ms[i] = logw[i] + lns;
    t_d[i] = logw[i] + std::log(a) + ls + lns;
  }
  const double lo = std::log(kDsfClamp);
  const double hi = std::log1p(-kDsfClamp);
  const double log_s = std::clamp(logsumexp(t_s), lo, hi);
  const double log_1ms = std::clamp(logsumexp(t_1ms), lo, hi);
  return {log_s - log_1ms, logsumexp(t_d) - log_s - log_1ms};
}

}  // namespace detail

inline FlowEvaluation dsf_forward(double x, const DSFParams& p) {
  FlowEvaluation out{x, 0.0};
  for (int l = 0; l < p.layers; ++l) {
    const FlowEvaluation step = detail::dsf_layer(out.eps, p.a_hat(l), p.b(l), p.w_hat(l));
    if (!std::isfinite(step.eps) || !std::isfinite(step.logdet))
      throw FlowStabilityError(l, "non-finite intermediate value");
    out.eps = step.eps;
    out.logdet += step.logdet;
  }
  return out;
}

// Inverts one layer by bracket doubling from [-1, 1] followed by bisection.
inline double dsf_layer_inverse(double y, std::span<const double> a_hat, std::span<const double> b,
                                std::span<const double> w_hat) {
  auto f = [&](double x) { return detail::dsf_layer(x, a_hat, b, w_hat).eps; };
  double lo = -1.0, hi = 1.0;
  while (f(lo) > y) {
    lo *= 2.0;
    if (lo < -1e9) throw InversionRangeError("no bracket below for target " + std::to_string(y));
  }
  while (f(hi) < y) {
    hi *= 2.0;
    if (hi > 1e9) throw InversionRangeError("no bracket above for target " + std::to_string(y));
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double fm = f(mid);
    if (fm == y) return mid;
    if (fm < y)
      lo = mid;
    else
      hi = mid;
  }
  return std::abs(f(lo) - y) <= std::abs(f(hi) - y) ? lo : hi;
}

inline double dsf_inverse(double eps, const DSFParams& p) {
  double x = eps;
  for (int l = p.layers - 1; l >= 0; --l) x = dsf_layer_inverse(x, p.a_hat(l), p.b(l), p.w_hat(l));
  return x;
}

// Differentiable forward pass for a batch: raw is B x (3*K*L), x is B x 1.
// Returns (eps, logdet), both B x 1.
inline std::pair<Var, Var> dsf_forward(Tape& tape, Var raw, Var x, int layers, int units) {
  const double lo = std::log(kDsfClamp);
  const double hi = std::log1p(-kDsfClamp);
  Var logdet{};
  for (int l = 0; l < layers; ++l) {
    Var a_hat = tape.slice_cols(raw, 3 * l * units, units);
    Var b = tape.slice_cols(raw, (3 * l + 1) * units, units);
    Var w_hat = tape.slice_cols(raw, (3 * l + 2) * units, units);
    Var a = tape.add_const(tape.softplus(a_hat), kDsfMinA);
    Var logw = tape.log_softmax_cols(w_hat);
    Var pre = tape.add(tape.mul(a, x), b);
    Var ls = tape.log_sigmoid(pre);
    Var lns = tape.log_sigmoid(tape.neg(pre));
    Var log_s = tape.clamp(tape.logsumexp_cols(tape.add(logw, ls)), lo, hi);
    Var log_1ms = tape.clamp(tape.logsumexp_cols(tape.add(logw, lns)), lo, hi);
    Var log_d =
        tape.logsumexp_cols(tape.add(tape.add(logw, tape.log(a)), tape.add(ls, lns)));
    Var layer_logdet = tape.sub(tape.sub(log_d, log_s), log_1ms);
    x = tape.sub(log_s, log_1ms);
    logdet = logdet.valid() ? tape.add(logdet, layer_logdet) : layer_logdet;
  }
  if (!logdet.valid()) logdet = tape.constant({tape.shape(x).rows, 1},
                                              std::vector<double>(tape.shape(x).size(), 0.0));
  return {x, logdet};
}

// Conditioner bias that makes every layer the identity map:
// a = 1, b = 0, w uniform.
inline std::vector<double> dsf_identity_raw(int layers, int units) {
  const double a_hat = std::log(std::expm1(1.0 - kDsfMinA));
  std::vector<double> raw(static_cast<std::size_t>(3 * layers * units), 0.0);
  for (int l = 0; l < layers; ++l)
    for (int k = 0; k < units; ++k) raw[static_cast<std::size_t>(3 * l * units + k)] = a_hat;
  return raw;
}

// ---------------------------------------------------------------------------
// NCF unit
// ---------------------------------------------------------------------------

class FlowUnit : public CausalUnit {
 public:
  FlowUnit(std::string name, int input_dim, std::vector<int> hidden, int layers, int units,
           double init_jitter = 1e-2)
      : CausalUnit(std::move(name), input_dim),
        layers_(layers),
        units_(units),
        init_jitter_(init_jitter) {
    if (layers < 1 || units < 1)
      throw std::invalid_argument("flow node '" + name_ + "' needs layers, units >= 1");
    net_.input_dim = input_dim;
    net_.hidden = std::move(hidden);
    net_.output_dim = 3 * layers * units;
  }

  [[nodiscard]] UnitKind kind() const override { return UnitKind::Flow; }
  [[nodiscard]] int raw_dim() const override { return net_.output_dim; }
  [[nodiscard]] int layers() const { return layers_; }
  [[nodiscard]] int units() const { return units_; }

  // Identity-biased start. Jitter on the b offsets separates the sigmoid
  // units so they do not receive identical gradients.
  void init_params(ParamStore& store, Rng& rng) const override {
    std::vector<double> bias = dsf_identity_raw(layers_, units_);
    if (init_jitter_ > 0.0)
      for (int l = 0; l < layers_; ++l)
        for (int k = 0; k < units_; ++k)
          bias[static_cast<std::size_t>((3 * l + 1) * units_ + k)] +=
              init_jitter_ * std_normal(rng);
    mlp_init(store, net_, name_, rng, init_jitter_, bias);
  }

  Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const override {
    return mlp_forward(tape, store, net_, name_, inputs);
  }

  Var loglk(Tape& tape, Var raw, Var values) const override {
    Var z = normalized(tape, values);
    auto [eps, logdet] = dsf_forward(tape, raw, z, layers_, units_);
    Var base = tape.add_const(tape.scale(tape.square(eps), -0.5), -kHalfLog2Pi);
    return tape.add_const(tape.add(base, logdet), normalizer.loglk_correction());
  }

  [[nodiscard]] DSFParams params(std::span<const double> raw) const {
    return DSFParams{raw, layers_, units_};
  }

  [[nodiscard]] double sample(std::span<const double> raw,
                              std::span<const double> noise) const override {
    check_finite(raw);
    return normalizer.denormalize(dsf_inverse(noise[0], params(raw)));
  }

  [[nodiscard]] NoisePosterior abduct(std::span<const double> raw, double value) const override {
    check_finite(raw);
    return NoisePosterior::exact(dsf_forward(normalizer.normalize(value), params(raw)).eps);
  }

  // Scalar log-density, matching loglk.
  [[nodiscard]] double log_density(std::span<const double> raw, double value) const {
    const FlowEvaluation e = dsf_forward(normalizer.normalize(value), params(raw));
    return -0.5 * e.eps * e.eps - kHalfLog2Pi + e.logdet + normalizer.loglk_correction();
  }

 private:
  MLPSpec net_;
  int layers_;
  int units_;
  double init_jitter_;
};

}  // namespace dcg
