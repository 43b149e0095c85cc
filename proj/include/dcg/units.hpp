#pragma once

// Deep causal units: per-node conditional distributions exposing sample,
// loglk and abduct. Every unit maps its encoded parent values through a
// parameter network to "raw" distribution parameters; loglk is built on the
// autodiff tape, while sample/abduct work on one row of raw parameters at a
// time in plain doubles.

#include "dcg/autodiff.hpp"
#include "dcg/random.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2*pi)/2

class UnitError : public std::runtime_error {
 public:
  UnitError(const std::string& node, const std::string& what)
      : std::runtime_error("node '" + node + "': " + what), node_(node) {}
  [[nodiscard]] const std::string& node() const { return node_; }

 private:
  std::string node_;
};

class AbductionError : public UnitError {
 public:
  using UnitError::UnitError;
};

class DegenerateColumnError : public std::runtime_error {
 public:
  explicit DegenerateColumnError(const std::string& column)
      : std::runtime_error("column '" + column + "' has zero variance"), column_(column) {}
  [[nodiscard]] const std::string& column() const { return column_; }

 private:
  std::string column_;
};

enum class UnitKind { Normal, GLM, ALD, Bernoulli, Categorical, Flow, Confounder };

inline const char* unit_kind_name(UnitKind k) {
  switch (k) {
    case UnitKind::Normal: return "normal";
    case UnitKind::GLM: return "glm";
    case UnitKind::ALD: return "ald";
    case UnitKind::Bernoulli: return "bernoulli";
    case UnitKind::Categorical: return "categorical";
    case UnitKind::Flow: return "flow";
    case UnitKind::Confounder: return "confounder";
  }
  return "?";
}

inline UnitKind parse_unit_kind(const std::string& s) {
  for (UnitKind k : {UnitKind::Normal, UnitKind::GLM, UnitKind::ALD, UnitKind::Bernoulli,
                     UnitKind::Categorical, UnitKind::Flow, UnitKind::Confounder})
    if (s == unit_kind_name(k)) return k;
  throw std::invalid_argument("unknown unit kind '" + s + "'");
}

inline bool is_discrete_kind(UnitKind k) {
  return k == UnitKind::Bernoulli || k == UnitKind::Categorical;
}

// Location/scale standardization wrapped around continuous units.
struct Normalizer {
  double loc = 0.0;
  double scale = 1.0;

  // Population mean and standard deviation of the column.
  static Normalizer fit(std::span<const double> xs, const std::string& column = "?") {
    if (xs.size() < 2) throw DegenerateColumnError(column);
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    if (!(var > 0.0) || !std::isfinite(var)) throw DegenerateColumnError(column);
    return {mean, std::sqrt(var)};
  }

  [[nodiscard]] double normalize(double x) const { return (x - loc) / scale; }
  [[nodiscard]] double denormalize(double z) const { return loc + scale * z; }
  // Added to a z-space log-density to obtain the x-space log-density.
  [[nodiscard]] double loglk_correction() const { return -std::log(scale); }

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

// Posterior over a node's exogenous noise given its value and parents.
struct NoisePosterior {
  enum class Kind { Exact, Interval, Rejection };
  Kind kind = Kind::Exact;
  double value = 0.0;              // Exact
  double lo = 0.0, hi = 1.0;       // Interval: uniform on [lo, hi)
  std::vector<double> logits;      // Rejection: categorical logits
  int observed = 0;                // Rejection: class to regenerate
  int max_attempts = 10000;

  static NoisePosterior exact(double e) {
    NoisePosterior p;
    p.kind = Kind::Exact;
    p.value = e;
    return p;
  }
  static NoisePosterior interval(double lo, double hi) {
    NoisePosterior p;
    p.kind = Kind::Interval;
    p.lo = lo;
    p.hi = hi;
    return p;
  }
};

struct UnitHyper {
  std::vector<int> hidden{32, 32};
  int classes = 0;       // categorical only
  int flow_layers = 2;   // flow only
  int flow_units = 8;    // flow only
  double init_jitter = 1e-2;
};

class CausalUnit {
 public:
  CausalUnit(std::string name, int input_dim) : name_(std::move(name)), input_dim_(input_dim) {}
  virtual ~CausalUnit() = default;
  CausalUnit(const CausalUnit&) = delete;
  CausalUnit& operator=(const CausalUnit&) = delete;

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] int input_dim() const { return input_dim_; }

  [[nodiscard]] virtual UnitKind kind() const = 0;
  [[nodiscard]] bool discrete() const { return is_discrete_kind(kind()); }
  // Support size for discrete units, 0 for continuous ones.
  [[nodiscard]] virtual int classes() const { return 0; }
  [[nodiscard]] virtual int noise_dim() const { return 1; }
  [[nodiscard]] virtual int raw_dim() const = 0;

  virtual void init_params(ParamStore& store, Rng& rng) const = 0;

  // B x input_dim -> B x raw_dim
  virtual Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const = 0;
  // B x 1 log-density of `values` (data units) given raw parameters.
  virtual Var loglk(Tape& tape, Var raw, Var values) const = 0;

  [[nodiscard]] virtual double sample(std::span<const double> raw,
                                      std::span<const double> noise) const = 0;
  [[nodiscard]] virtual NoisePosterior abduct(std::span<const double> raw, double value) const = 0;

  virtual void draw_prior_noise(Rng& rng, std::span<double> out) const {
    for (double& e : out) e = std_normal(rng);
  }

  virtual void draw_posterior_noise(const NoisePosterior& post, Rng& rng,
                                    std::span<double> out) const {
    switch (post.kind) {
      case NoisePosterior::Kind::Exact:
        out[0] = post.value;
        return;
      case NoisePosterior::Kind::Interval:
        out[0] = post.lo + (post.hi - post.lo) * uniform01(rng);
        return;
      case NoisePosterior::Kind::Rejection:
        throw AbductionError(name_, "rejection posterior on a non-categorical unit");
    }
  }

  [[nodiscard]] bool has_normalizer() const { return !discrete() && kind() != UnitKind::Confounder; }
  Normalizer normalizer;

  // Evaluates raw parameters for a batch without keeping the tape around.
  [[nodiscard]] std::vector<double> eval_raw(const ParamStore& store,
                                             std::span<const double> inputs, int rows) const {
    Tape tape;
    Var in = tape.constant({rows, input_dim_}, {inputs.begin(), inputs.end()});
    Var raw = raw_params(tape, store, in);
    std::vector<double> out = tape.value(raw);
    for (double x : out)
      if (!std::isfinite(x)) throw UnitError(name_, "parameter network produced a non-finite value");
    return out;
  }

 protected:
  // z = (x - loc) / scale on the tape.
  Var normalized(Tape& tape, Var values) const {
    if (normalizer.loc == 0.0 && normalizer.scale == 1.0) return values;
    return tape.scale(tape.add_const(values, -normalizer.loc), 1.0 / normalizer.scale);
  }
  void check_finite(std::span<const double> raw) const {
    for (double x : raw)
      if (!std::isfinite(x)) throw UnitError(name_, "non-finite distribution parameter");
  }

  std::string name_;
  int input_dim_;
};

// ---------------------------------------------------------------------------
// Gaussian DCN. GLM is the same unit with a purely affine parameter network.
// ---------------------------------------------------------------------------

class NormalUnit : public CausalUnit {
 public:
  NormalUnit(std::string name, int input_dim, std::vector<int> hidden, bool glm = false)
      : CausalUnit(std::move(name), input_dim), glm_(glm) {
    net_.input_dim = input_dim;
    net_.hidden = glm ? std::vector<int>{} : std::move(hidden);
    net_.output_dim = 2;
  }

  [[nodiscard]] UnitKind kind() const override { return glm_ ? UnitKind::GLM : UnitKind::Normal; }
  [[nodiscard]] int raw_dim() const override { return 2; }
  [[nodiscard]] const MLPSpec& net() const { return net_; }

  void init_params(ParamStore& store, Rng& rng) const override {
    mlp_init(store, net_, name_, rng, 0.1);
  }

  Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const override {
    return mlp_forward(tape, store, net_, name_, inputs);
  }

  // raw = (mu, log sigma) in normalized units.
  Var loglk(Tape& tape, Var raw, Var values) const override {
    Var z = normalized(tape, values);
    Var mu = tape.slice_cols(raw, 0, 1);
    Var log_sigma = tape.slice_cols(raw, 1, 1);
    Var std = tape.div(tape.sub(z, mu), tape.exp(log_sigma));
    Var lp = tape.sub(tape.scale(tape.square(std), -0.5), log_sigma);
    return tape.add_const(lp, -kHalfLog2Pi + normalizer.loglk_correction());
  }

  [[nodiscard]] double sample(std::span<const double> raw,
                              std::span<const double> noise) const override {
    check_finite(raw);
    return normalizer.denormalize(raw[0] + std::exp(raw[1]) * noise[0]);
  }

  [[nodiscard]] NoisePosterior abduct(std::span<const double> raw, double value) const override {
    check_finite(raw);
    return NoisePosterior::exact((normalizer.normalize(value) - raw[0]) / std::exp(raw[1]));
  }

  static double log_density(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return -0.5 * z * z - std::log(sigma) - kHalfLog2Pi;
  }

 private:
  MLPSpec net_;
  bool glm_;
};

// ---------------------------------------------------------------------------
// Asymmetric Laplace DCN with location m, rate lambda and asymmetry kappa:
//   p(x) = lambda / (kappa + 1/kappa) * exp(-lambda * kappa * (x - m))   x >= m
//   p(x) = lambda / (kappa + 1/kappa) * exp( lambda / kappa * (x - m))   x <  m
// ---------------------------------------------------------------------------

class ALDUnit : public CausalUnit {
 public:
  ALDUnit(std::string name, int input_dim, std::vector<int> hidden)
      : CausalUnit(std::move(name), input_dim) {
    net_.input_dim = input_dim;
    net_.hidden = std::move(hidden);
    net_.output_dim = 3;
  }

  [[nodiscard]] UnitKind kind() const override { return UnitKind::ALD; }
  [[nodiscard]] int raw_dim() const override { return 3; }

  void init_params(ParamStore& store, Rng& rng) const override {
    // lambda = sqrt(2) makes the symmetric start unit-variance.
    const double bias[3] = {0.0, 0.5 * std::log(2.0), 0.0};
    mlp_init(store, net_, name_, rng, 0.1, bias);
  }

  Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const override {
    return mlp_forward(tape, store, net_, name_, inputs);
  }

  Var loglk(Tape& tape, Var raw, Var values) const override {
    Var z = normalized(tape, values);
    Var m = tape.slice_cols(raw, 0, 1);
    Var log_lambda = tape.slice_cols(raw, 1, 1);
    Var log_kappa = tape.slice_cols(raw, 2, 1);
    Var lambda = tape.exp(log_lambda);
    Var kappa = tape.exp(log_kappa);
    Var inv_kappa = tape.exp(tape.neg(log_kappa));
    Var d = tape.sub(z, m);
    Var right = tape.mul(tape.mul(lambda, kappa), tape.relu(d));
    Var left = tape.mul(tape.mul(lambda, inv_kappa), tape.relu(tape.neg(d)));
    Var lp = tape.sub(log_lambda, tape.log(tape.add(kappa, inv_kappa)));
    lp = tape.sub(tape.sub(lp, right), left);
    return tape.add_const(lp, normalizer.loglk_correction());
  }

  static double log_density(double x, double m, double lambda, double kappa) {
    const double d = x - m;
    const double base = std::log(lambda) - std::log(kappa + 1.0 / kappa);
    return d >= 0.0 ? base - lambda * kappa * d : base + lambda * d / kappa;
  }
  static double cdf(double x, double m, double lambda, double kappa) {
    const double d = x - m;
    const double k2 = kappa * kappa;
    if (d < 0.0) return k2 / (1.0 + k2) * std::exp(lambda * d / kappa);
    return 1.0 - std::exp(-lambda * kappa * d) / (1.0 + k2);
  }
  static double quantile(double u, double m, double lambda, double kappa) {
    const double k2 = kappa * kappa;
    const double split = k2 / (1.0 + k2);
    if (u < split) return m + kappa / lambda * std::log(u * (1.0 + k2) / k2);
    return m - std::log((1.0 - u) * (1.0 + k2)) / (lambda * kappa);
  }

  void draw_prior_noise(Rng& rng, std::span<double> out) const override {
    out[0] = uniform_open(rng);
  }

  [[nodiscard]] double sample(std::span<const double> raw,
                              std::span<const double> noise) const override {
    check_finite(raw);
    return normalizer.denormalize(
        quantile(noise[0], raw[0], std::exp(raw[1]), std::exp(raw[2])));
  }

  [[nodiscard]] NoisePosterior abduct(std::span<const double> raw, double value) const override {
    check_finite(raw);
    return NoisePosterior::exact(
        cdf(normalizer.normalize(value), raw[0], std::exp(raw[1]), std::exp(raw[2])));
  }

 private:
  MLPSpec net_;
};

// ---------------------------------------------------------------------------
// Bernoulli DCN: x = 1[e < p], e ~ U(0, 1).
// ---------------------------------------------------------------------------

class BernoulliUnit : public CausalUnit {
 public:
  BernoulliUnit(std::string name, int input_dim, std::vector<int> hidden)
      : CausalUnit(std::move(name), input_dim) {
    net_.input_dim = input_dim;
    net_.hidden = std::move(hidden);
    net_.output_dim = 1;
  }

  [[nodiscard]] UnitKind kind() const override { return UnitKind::Bernoulli; }
  [[nodiscard]] int classes() const override { return 2; }
  [[nodiscard]] int raw_dim() const override { return 1; }

  void init_params(ParamStore& store, Rng& rng) const override {
    mlp_init(store, net_, name_, rng, 0.1);
  }

  Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const override {
    return mlp_forward(tape, store, net_, name_, inputs);
  }

  Var loglk(Tape& tape, Var raw, Var values) const override {
    for (double x : tape.value(values))
      if (x != 0.0 && x != 1.0)
        throw UnitError(name_, "value " + std::to_string(x) + " outside {0, 1}");
    Var pos = tape.mul(values, tape.log_sigmoid(raw));
    Var neg = tape.mul(tape.add_const(tape.neg(values), 1.0), tape.log_sigmoid(tape.neg(raw)));
    return tape.add(pos, neg);
  }

  void draw_prior_noise(Rng& rng, std::span<double> out) const override {
    out[0] = uniform01(rng);
  }

  [[nodiscard]] double sample(std::span<const double> raw,
                              std::span<const double> noise) const override {
    check_finite(raw);
    return noise[0] < detail::sigmoid(raw[0]) ? 1.0 : 0.0;
  }

  // Exact truncated posterior: e | x=1 ~ U[0, p), e | x=0 ~ U[p, 1).
  [[nodiscard]] NoisePosterior abduct(std::span<const double> raw, double value) const override {
    check_finite(raw);
    const double p = detail::sigmoid(raw[0]);
    if (value == 1.0) return NoisePosterior::interval(0.0, p);
    if (value == 0.0) return NoisePosterior::interval(p, 1.0);
    throw UnitError(name_, "value " + std::to_string(value) + " outside {0, 1}");
  }

 private:
  MLPSpec net_;
};

// ---------------------------------------------------------------------------
// Categorical DCN sampled with the Gumbel-max trick.
// ---------------------------------------------------------------------------

class CategoricalUnit : public CausalUnit {
 public:
  CategoricalUnit(std::string name, int input_dim, std::vector<int> hidden, int classes)
      : CausalUnit(std::move(name), input_dim), classes_(classes) {
    if (classes < 2) throw std::invalid_argument("categorical node '" + name_ + "' needs K >= 2");
    net_.input_dim = input_dim;
    net_.hidden = std::move(hidden);
    net_.output_dim = classes;
  }

  [[nodiscard]] UnitKind kind() const override { return UnitKind::Categorical; }
  [[nodiscard]] int classes() const override { return classes_; }
  [[nodiscard]] int noise_dim() const override { return classes_; }
  [[nodiscard]] int raw_dim() const override { return classes_; }

  void init_params(ParamStore& store, Rng& rng) const override {
    mlp_init(store, net_, name_, rng, 0.1);
  }

  Var raw_params(Tape& tape, const ParamStore& store, Var inputs) const override {
    return mlp_forward(tape, store, net_, name_, inputs);
  }

  Var loglk(Tape& tape, Var raw, Var values) const override {
    const Shape s = tape.shape(raw);
    std::vector<double> onehot(s.size(), 0.0);
    const auto& v = tape.value(values);
    for (int r = 0; r < s.rows; ++r) {
      const double x = v[static_cast<std::size_t>(r)];
      const int k = static_cast<int>(x);
      if (k != x || k < 0 || k >= classes_)
        throw UnitError(name_, "class " + std::to_string(x) + " outside [0, " +
                                   std::to_string(classes_) + ")");
      onehot[static_cast<std::size_t>(r) * classes_ + k] = 1.0;
    }
    Var mask = tape.constant(s, std::move(onehot));
    return tape.sum_cols(tape.mul(tape.log_softmax_cols(raw), mask));
  }

  void draw_prior_noise(Rng& rng, std::span<double> out) const override {
    for (double& g : out) g = gumbel(rng);
  }

  [[nodiscard]] double sample(std::span<const double> raw,
                              std::span<const double> noise) const override {
    check_finite(raw);
    int best = 0;
    double best_score = raw[0] + noise[0];
    for (int k = 1; k < classes_; ++k) {
      const double score = raw[static_cast<std::size_t>(k)] + noise[static_cast<std::size_t>(k)];
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    return static_cast<double>(best);
  }

  [[nodiscard]] NoisePosterior abduct(std::span<const double> raw, double value) const override {
    check_finite(raw);
    const int k = static_cast<int>(value);
    if (k != value || k < 0 || k >= classes_)
      throw UnitError(name_, "class " + std::to_string(value) + " outside support");
    NoisePosterior p;
    p.kind = NoisePosterior::Kind::Rejection;
    p.logits.assign(raw.begin(), raw.end());
    p.observed = k;
    return p;
  }

  // Redraws Gumbel vectors until their argmax reproduces the observed class.
  void draw_posterior_noise(const NoisePosterior& post, Rng& rng,
                            std::span<double> out) const override {
    if (post.kind != NoisePosterior::Kind::Rejection) {
      CausalUnit::draw_posterior_noise(post, rng, out);
      return;
    }
    for (int attempt = 0; attempt < post.max_attempts; ++attempt) {
      draw_prior_noise(rng, out);
      if (static_cast<int>(sample(post.logits, out)) == post.observed) return;
    }
    throw AbductionError(name_, "rejection sampling exhausted " +
                                    std::to_string(post.max_attempts) + " attempts");
  }

 private:
  MLPSpec net_;
  int classes_;
};

// ---------------------------------------------------------------------------
// Latent confounder: a parameter-free standard normal source.
// ---------------------------------------------------------------------------

class ConfounderUnit : public CausalUnit {
 public:
  explicit ConfounderUnit(std::string name) : CausalUnit(std::move(name), 0) {}

  [[nodiscard]] UnitKind kind() const override { return UnitKind::Confounder; }
  [[nodiscard]] int raw_dim() const override { return 0; }
  void init_params(ParamStore&, Rng&) const override {}

  Var raw_params(Tape& tape, const ParamStore&, Var inputs) const override {
    return tape.constant({tape.shape(inputs).rows, 0}, {});
  }

  Var loglk(Tape& tape, Var, Var values) const override {
    return tape.add_const(tape.scale(tape.square(values), -0.5), -kHalfLog2Pi);
  }

  [[nodiscard]] double sample(std::span<const double>, std::span<const double> noise) const override {
    return noise[0];
  }

  [[nodiscard]] NoisePosterior abduct(std::span<const double>, double value) const override {
    return NoisePosterior::exact(value);
  }

  double sample(Rng& rng) const { return std_normal(rng); }
};

}  // namespace dcg
