#pragma once

// Counterfactual unfairness, CU_2-regularized predictor training, per-group
// rank agreement and per-sample counterfactual explanations.
//
//   CU_k = mean over rows of |Y' - Y|^k
//
// where Y is the prediction on the factual row and Y' the importance-weighted
// mean prediction over counterfactual rows generated under an intervention
// on the protected node.

#include "dcg/graph.hpp"
#include "dcg/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr const char* kPredictorVersion = "dcg-predictor/1";

class FairnessError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Maps feature vectors to a scalar. Feature columns are looked up by name.
class Predictor {
 public:
  virtual ~Predictor() = default;
  [[nodiscard]] virtual const std::vector<std::string>& features() const = 0;
  [[nodiscard]] virtual std::vector<double> predict_features(const std::vector<double>& x, int rows) const = 0;

  // Row-major feature matrix extracted from a table by column name.
  [[nodiscard]] std::vector<double> feature_matrix(const Table& t) const {
    const auto& f = features();
    std::vector<int> idx;
    for (const auto& name : f) {
      const int c = t.index_of(name);
      if (c < 0) throw FairnessError("table has no column for feature '" + name + "'");
      idx.push_back(c);
    }
    std::vector<double> x(static_cast<std::size_t>(t.rows) * f.size());
    for (int r = 0; r < t.rows; ++r)
      for (std::size_t j = 0; j < idx.size(); ++j) x[static_cast<std::size_t>(r) * f.size() + j] = t.at(r, idx[j]);
    return x;
  }

  [[nodiscard]] std::vector<double> predict(const Table& t) const {
    return predict_features(feature_matrix(t), t.rows);
  }
};

// Wraps an arbitrary function of one feature row.
class FunctionPredictor : public Predictor {
 public:
  using Fn = std::function<double(std::span<const double>)>;
  FunctionPredictor(std::vector<std::string> features, Fn fn) : features_(std::move(features)), fn_(std::move(fn)) {}
  [[nodiscard]] const std::vector<std::string>& features() const override { return features_; }
  [[nodiscard]] std::vector<double> predict_features(const std::vector<double>& x, int rows) const override {
    std::vector<double> out(static_cast<std::size_t>(rows));
    const std::size_t f = features_.size();
    for (int r = 0; r < rows; ++r)
      out[static_cast<std::size_t>(r)] = fn_(std::span<const double>(x).subspan(static_cast<std::size_t>(r) * f, f));
    return out;
  }

 private:
  std::vector<std::string> features_;
  Fn fn_;
};

// Trainable MLP regressor on standardized features with a standardized target.
class MLPPredictor : public Predictor {
 public:
  MLPPredictor(std::vector<std::string> features, std::string target, std::vector<int> hidden = {32, 32})
      : features_(std::move(features)), target_(std::move(target)) {
    for (const auto& f : features_)
      if (f == target_) throw FairnessError("target '" + target_ + "' cannot also be a feature");
    net_.input_dim = static_cast<int>(features_.size());
    net_.hidden = std::move(hidden);
    net_.output_dim = 1;
    feature_norm_.assign(features_.size(), Normalizer{});
  }

  [[nodiscard]] const std::vector<std::string>& features() const override { return features_; }
  [[nodiscard]] const std::string& target() const { return target_; }
  [[nodiscard]] const MLPSpec& net() const { return net_; }
  ParamStore& params() { return params_; }
  [[nodiscard]] const ParamStore& params() const { return params_; }

  void init(const Table& data, std::uint64_t seed) {
    params_ = ParamStore{};
    Rng rng = make_rng(seed, {0x9E7ULL});
    mlp_init(params_, net_, "predictor", rng);
    for (std::size_t j = 0; j < features_.size(); ++j) {
      const auto col = data.column(features_[j]);
      try {
        feature_norm_[j] = Normalizer::fit(col, features_[j]);
      } catch (const DegenerateColumnError&) {
        feature_norm_[j] = Normalizer{col.empty() ? 0.0 : col[0], 1.0};
      }
    }
    target_norm_ = Normalizer::fit(data.column(target_), target_);
  }

  // Normalized network input for a raw feature matrix.
  [[nodiscard]] std::vector<double> standardize(std::vector<double> x, int rows) const {
    const std::size_t f = features_.size();
    for (int r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < f; ++j) {
        double& v = x[static_cast<std::size_t>(r) * f + j];
        v = feature_norm_[j].normalize(v);
      }
    return x;
  }

  // Normalized-space output on the tape (B x 1).
  Var forward(Tape& tape, const std::vector<double>& raw_features, int rows) const {
    Var in = tape.constant({rows, net_.input_dim}, standardize(raw_features, rows));
    return mlp_forward(tape, params_, net_, "predictor", in);
  }

  [[nodiscard]] std::vector<double> predict_features(const std::vector<double>& x, int rows) const override {
    Tape tape;
    std::vector<double> out = tape.value(forward(tape, x, rows));
    for (double& y : out) y = target_norm_.denormalize(y);
    return out;
  }

  [[nodiscard]] const Normalizer& target_normalizer() const { return target_norm_; }

  [[nodiscard]] nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = kPredictorVersion;
    j["features"] = features_;
    j["target"] = target_;
    j["hidden"] = net_.hidden;
    auto& fn = j["feature_normalizers"] = nlohmann::ordered_json::array();
    for (const auto& n : feature_norm_) fn.push_back({{"loc", n.loc}, {"scale", n.scale}});
    j["target_normalizer"] = {{"loc", target_norm_.loc}, {"scale", target_norm_.scale}};
    auto& ps = j["params"] = nlohmann::ordered_json::object();
    for (const auto& p : params_)
      ps[p.name] = {{"rows", p.shape.rows}, {"cols", p.shape.cols}, {"values", p.value}};
    return j;
  }

  static MLPPredictor from_json(const nlohmann::json& j) {
    try {
      const auto version = j.at("version").get<std::string>();
      if (version != kPredictorVersion) throw CheckpointError("predictor version '" + version + "' not supported");
      MLPPredictor p(j.at("features").get<std::vector<std::string>>(), j.at("target").get<std::string>(),
                     j.at("hidden").get<std::vector<int>>());
      const auto& fn = j.at("feature_normalizers");
      if (fn.size() != p.features_.size()) throw CheckpointError("predictor normalizer count mismatch");
      for (std::size_t i = 0; i < fn.size(); ++i)
        p.feature_norm_[i] = {fn[i].at("loc").get<double>(), fn[i].at("scale").get<double>()};
      p.target_norm_ = {j.at("target_normalizer").at("loc").get<double>(),
                        j.at("target_normalizer").at("scale").get<double>()};
      const auto dims = p.net_.layer_dims();
      for (int l = 0; l + 1 < static_cast<int>(dims.size()); ++l) {
        for (const auto& name : {mlp_weight_name("predictor", l), mlp_bias_name("predictor", l)}) {
          const auto& jp = j.at("params").at(name);
          Shape s{jp.at("rows").get<int>(), jp.at("cols").get<int>()};
          p.params_.add(name, s, jp.at("values").get<std::vector<double>>());
        }
      }
      return p;
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed predictor: ") + e.what());
    } catch (const ShapeError& e) {
      throw CheckpointError(std::string("malformed predictor: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write predictor '" + path + "'");
    out << to_json().dump(1) << "\n";
  }
  static MLPPredictor load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open predictor '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed predictor: ") + e.what());
    }
    return from_json(j);
  }

 private:
  std::vector<std::string> features_;
  std::string target_;
  MLPSpec net_;
  ParamStore params_;
  std::vector<Normalizer> feature_norm_;
  Normalizer target_norm_;
};

// ---- interventions on the protected node ----------------------------------

// Values the protected node is set to for a row. Binary nodes use the
// complement of the factual value; other discrete nodes need an explicit list
// (the factual value is skipped).
struct ProtectedPolicy {
  std::string node;
  std::vector<double> values;

  [[nodiscard]] std::vector<double> targets(const CausalGraph& g, double factual) const {
    const auto& u = g.unit(g.index_of(node));
    if (values.empty()) {
      if (u.kind() != UnitKind::Bernoulli)
        throw FairnessError("protected node '" + node + "' is not binary; give explicit intervention values");
      return {1.0 - factual};
    }
    std::vector<double> out;
    for (double v : values)
      if (v != factual) out.push_back(v);
    return out;
  }
};

inline void check_protected(const CausalGraph& g, const ProtectedPolicy& policy) {
  const int idx = g.index_of(policy.node);
  if (!g.unit(idx).discrete()) throw FairnessError("protected node '" + policy.node + "' must be discrete");
  (void)policy.targets(g, 0.0);
}

// Counterfactual rows for one evidence row, merged over the policy's values
// with equal weight per value. Seeded per row.
inline CounterfactualSet protected_counterfactuals(const CausalGraph& g, std::span<const double> evidence,
                                                   const ProtectedPolicy& policy, const InferenceConfig& cfg,
                                                   std::uint64_t row_seed) {
  const double factual = evidence[static_cast<std::size_t>(g.observed_position(policy.node))];
  const auto targets = policy.targets(g, factual);
  CounterfactualSet merged;
  merged.rows = Table(g.observed_names(), 0);
  if (targets.empty()) return merged;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    InferenceConfig c = cfg;
    c.seed = derive_seed(row_seed, {static_cast<std::uint64_t>(t)});
    const auto set = g.counterfactual(evidence, {{policy.node, targets[t]}}, c);
    for (int r = 0; r < set.rows.rows; ++r) {
      merged.rows.append_row(set.rows.row(r));
      merged.weights.push_back(set.weights[static_cast<std::size_t>(r)] / static_cast<double>(targets.size()));
      merged.draw.push_back(set.draw[static_cast<std::size_t>(r)]);
    }
    merged.mc_samples = set.mc_samples;
  }
  return merged;
}

// ---- CU_k -----------------------------------------------------------------

struct CUResult {
  std::vector<double> factual;         // Y per row
  std::vector<double> counterfactual;  // Y' per row
  int k = 1;

  [[nodiscard]] double cu(int degree) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < factual.size(); ++i) acc += std::pow(std::abs(counterfactual[i] - factual[i]), degree);
    return factual.empty() ? 0.0 : acc / static_cast<double>(factual.size());
  }
};

// rows are in the graph's observed order.
inline CUResult counterfactual_predictions(const CausalGraph& g, const Predictor& pred, const ProtectedPolicy& policy,
                                           const Table& rows, const InferenceConfig& cfg) {
  check_protected(g, policy);
  g.check_rows(rows);
  CUResult res;
  res.factual = pred.predict(rows);
  res.counterfactual.resize(static_cast<std::size_t>(rows.rows));
  for (int r = 0; r < rows.rows; ++r) {
    const auto set = protected_counterfactuals(g, rows.row(r), policy, cfg,
                                               derive_seed(cfg.seed, {0xCF0ULL, static_cast<std::uint64_t>(r)}));
    if (set.rows.rows == 0) {
      res.counterfactual[static_cast<std::size_t>(r)] = res.factual[static_cast<std::size_t>(r)];
      continue;
    }
    const auto y = pred.predict(set.rows);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += set.weights[i] * y[i];
    res.counterfactual[static_cast<std::size_t>(r)] = acc;
  }
  return res;
}

inline double cu_k(const CausalGraph& g, const Predictor& pred, const ProtectedPolicy& policy, int k,
                   const Table& rows, const InferenceConfig& cfg) {
  if (k < 1) throw FairnessError("CU degree must be >= 1");
  return counterfactual_predictions(g, pred, policy, rows, cfg).cu(k);
}

// ---- black-box batch protocol ---------------------------------------------

// cf-inputs table: feature columns, row_id, cf_id, weight. cf_id 0 is the
// factual row (weight 1); cf_id >= 1 are counterfactual rows whose weights
// sum to 1 per row_id.
inline Table black_box_inputs(const CausalGraph& g, const std::vector<std::string>& features,
                              const ProtectedPolicy& policy, const Table& rows, const InferenceConfig& cfg) {
  check_protected(g, policy);
  g.check_rows(rows);
  auto cols = features;
  cols.insert(cols.end(), {"row_id", "cf_id", "weight"});
  Table out(cols, 0);
  std::vector<int> idx;
  for (const auto& f : features) idx.push_back(rows.require(f));
  std::vector<double> line(cols.size());
  auto emit = [&](const Table& src, int r, int row_id, int cf_id, double w) {
    for (std::size_t j = 0; j < idx.size(); ++j) line[j] = src.at(r, idx[j]);
    line[idx.size()] = row_id;
    line[idx.size() + 1] = cf_id;
    line[idx.size() + 2] = w;
    out.append_row(line);
  };
  for (int r = 0; r < rows.rows; ++r) {
    emit(rows, r, r, 0, 1.0);
    const auto set = protected_counterfactuals(g, rows.row(r), policy, cfg,
                                               derive_seed(cfg.seed, {0xCF0ULL, static_cast<std::uint64_t>(r)}));
    for (int i = 0; i < set.rows.rows; ++i) emit(set.rows, i, r, i + 1, set.weights[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Combines cf-inputs with cf-preds (row_id, cf_id, prediction) into Y and Y'.
inline CUResult cu_from_black_box(const Table& inputs, const Table& preds) {
  const int in_row = inputs.require("row_id"), in_cf = inputs.require("cf_id"), in_w = inputs.require("weight");
  const int p_row = preds.require("row_id"), p_cf = preds.require("cf_id"), p_y = preds.require("prediction");
  std::map<std::pair<int, int>, double> y;
  for (int r = 0; r < preds.rows; ++r) {
    const auto key = std::make_pair(static_cast<int>(preds.at(r, p_row)), static_cast<int>(preds.at(r, p_cf)));
    if (!y.emplace(key, preds.at(r, p_y)).second)
      throw FairnessError("duplicate prediction for row_id " + std::to_string(key.first) + ", cf_id " +
                          std::to_string(key.second));
  }
  if (static_cast<int>(y.size()) != inputs.rows)
    throw FairnessError("prediction file has " + std::to_string(y.size()) + " entries, inputs have " +
                        std::to_string(inputs.rows));
  CUResult res;
  int expected_row = 0;
  for (int r = 0; r < inputs.rows; ++r) {
    const int row_id = static_cast<int>(inputs.at(r, in_row));
    const int cf_id = static_cast<int>(inputs.at(r, in_cf));
    auto it = y.find({row_id, cf_id});
    if (it == y.end())
      throw FairnessError("missing prediction for row_id " + std::to_string(row_id) + ", cf_id " +
                          std::to_string(cf_id));
    if (cf_id == 0) {
      if (row_id != expected_row) throw FairnessError("row_id gap before " + std::to_string(row_id));
      ++expected_row;
      res.factual.push_back(it->second);
      res.counterfactual.push_back(0.0);
    } else {
      if (res.factual.empty() || row_id != expected_row - 1)
        throw FairnessError("counterfactual for row_id " + std::to_string(row_id) + " out of sequence");
      res.counterfactual.back() += inputs.at(r, in_w) * it->second;
    }
  }
  return res;
}

// ---- rank agreement ---------------------------------------------------------

inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<int> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return x[static_cast<std::size_t>(a)] < x[static_cast<std::size_t>(b)]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[static_cast<std::size_t>(idx[j + 1])] == x[static_cast<std::size_t>(idx[i])]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[static_cast<std::size_t>(idx[k])] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw FairnessError("spearman needs two equal series of >= 2 values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline std::string format_group(double g) {
  std::ostringstream os;
  os << g;
  return os.str();
}

inline std::map<double, double> spearman_by_group(std::span<const double> predictions, std::span<const double> targets,
                                                  std::span<const double> groups) {
  std::map<double, std::pair<std::vector<double>, std::vector<double>>> split;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    auto& [p, t] = split[groups[i]];
    p.push_back(predictions[i]);
    t.push_back(targets[i]);
  }
  std::map<double, double> out;
  for (const auto& [g, pt] : split) {
    if (pt.first.size() < 2) throw FairnessError("group " + format_group(g) + " has a single row");
    out[g] = spearman(pt.first, pt.second);
  }
  return out;
}

// ---- fair training ----------------------------------------------------------

struct FairConfig {
  int epochs = 200;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double clip_norm = 10.0;
  int n_cf = 5;
  int mc_samples = 100;
  std::uint64_t seed = 0;
};

struct FairnessReport {
  std::string protected_node;
  std::string policy;
  int samples = 0;
  double lambda = 0.0;
  double cu1 = 0.0;
  double cu2 = 0.0;
  double mse = 0.0;
  std::map<double, double> spearman;
};

inline nlohmann::ordered_json to_json(const FairnessReport& r) {
  nlohmann::ordered_json j;
  j["protected"] = r.protected_node;
  j["policy"] = r.policy;
  j["samples"] = r.samples;
  j["lambda"] = r.lambda;
  j["cu1"] = r.cu1;
  j["cu2"] = r.cu2;
  j["mse"] = r.mse;
  auto& s = j["spearman"] = nlohmann::ordered_json::object();
  for (const auto& [g, v] : r.spearman) s[format_group(g)] = v;
  return j;
}

// Evaluates a predictor on rows (observed order): CU_1, CU_2, MSE against
// the target column and per-group Spearman over the protected node.
inline FairnessReport fairness_report(const CausalGraph& g, const Predictor& pred, const ProtectedPolicy& policy,
                                      const std::string& target, const Table& rows, const InferenceConfig& cfg) {
  const auto res = counterfactual_predictions(g, pred, policy, rows, cfg);
  FairnessReport rep;
  rep.protected_node = policy.node;
  rep.policy = policy.values.empty() ? "complement" : "values";
  rep.samples = rows.rows;
  rep.cu1 = res.cu(1);
  rep.cu2 = res.cu(2);
  const auto y = rows.column(target);
  for (std::size_t i = 0; i < y.size(); ++i) rep.mse += (res.factual[i] - y[i]) * (res.factual[i] - y[i]);
  rep.mse /= static_cast<double>(y.size());
  rep.spearman = spearman_by_group(res.factual, y, rows.column(policy.node));
  return rep;
}

// Minimizes MSE(Y, target) + lambda * CU_2 over `rows` (observed order), both
// in standardized target units. Counterfactual feature sets (n_cf rows per
// training row) are drawn once from fixed per-row seeds; with lambda = 0 they
// are never drawn. Returns the per-epoch objective.
inline std::vector<double> train_fair(const CausalGraph& g, MLPPredictor& pred, const ProtectedPolicy& policy,
                                      double lambda, const Table& rows, const FairConfig& cfg) {
  if (lambda < 0.0) throw FairnessError("lambda must be >= 0");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.n_cf < 1 || !(cfg.learning_rate > 0.0))
    throw FairnessError("invalid fair-training configuration");
  g.check_rows(rows);
  pred.init(rows, cfg.seed);
  const int n = rows.rows;
  const int f = static_cast<int>(pred.features().size());
  const auto x = pred.feature_matrix(rows);
  std::vector<double> y = rows.column(pred.target());
  for (double& v : y) v = pred.target_normalizer().normalize(v);

  // Counterfactual cache: row i owns cf rows [off[i], off[i+1]).
  std::vector<double> cf_x, cf_w;
  std::vector<int> off{0};
  if (lambda > 0.0) {
    check_protected(g, policy);
    InferenceConfig ic;
    ic.cf_samples = cfg.n_cf;
    ic.mc_samples = cfg.mc_samples;
    ic.seed = cfg.seed;
    for (int r = 0; r < n; ++r) {
      const auto set = protected_counterfactuals(g, rows.row(r), policy, ic,
                                                 derive_seed(cfg.seed, {0xCF0ULL, static_cast<std::uint64_t>(r)}));
      const auto fx = pred.feature_matrix(set.rows);
      cf_x.insert(cf_x.end(), fx.begin(), fx.end());
      cf_w.insert(cf_w.end(), set.weights.begin(), set.weights.end());
      off.push_back(off.back() + set.rows.rows);
    }
  }

  const int batch = std::min(cfg.batch_size, n);
  const int batches = (n + batch - 1) / batch;
  const AdamConfig adam{cfg.learning_rate};
  std::vector<double> curve;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = seeded_permutation(n, derive_seed(cfg.seed, {0xFA1ULL, static_cast<std::uint64_t>(epoch)}));
    double total = 0.0;
    for (int b = 0; b < batches; ++b) {
      const int start = b * batch;
      const int len = std::min(batch, n - start);
      std::vector<double> bx(static_cast<std::size_t>(len) * f), by(static_cast<std::size_t>(len));
      for (int i = 0; i < len; ++i) {
        const int r = perm[static_cast<std::size_t>(start + i)];
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r) * f, f, bx.begin() + static_cast<std::ptrdiff_t>(i) * f);
        by[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(r)];
      }
      Tape tape;
      Var out = pred.forward(tape, bx, len);
      Var loss = tape.mean(tape.square(tape.sub(out, tape.column(by))));
      if (lambda > 0.0) {
        std::vector<double> cx, cw, seg;  // seg: len x total one-hot row sums
        int total_cf = 0;
        for (int i = 0; i < len; ++i) {
          const int r = perm[static_cast<std::size_t>(start + i)];
          total_cf += off[static_cast<std::size_t>(r) + 1] - off[static_cast<std::size_t>(r)];
        }
        seg.assign(static_cast<std::size_t>(len) * total_cf, 0.0);
        int col = 0;
        for (int i = 0; i < len; ++i) {
          const int r = perm[static_cast<std::size_t>(start + i)];
          for (int q = off[static_cast<std::size_t>(r)]; q < off[static_cast<std::size_t>(r) + 1]; ++q, ++col) {
            cx.insert(cx.end(), cf_x.begin() + static_cast<std::ptrdiff_t>(q) * f,
                      cf_x.begin() + static_cast<std::ptrdiff_t>(q + 1) * f);
            seg[static_cast<std::size_t>(i) * total_cf + col] = cf_w[static_cast<std::size_t>(q)];
          }
        }
        if (total_cf > 0) {
          Var cf_out = pred.forward(tape, cx, total_cf);  // total_cf x 1
          // Weighted per-row mean: (len x total_cf) . (total_cf x 1) as a
          // linear layer with zero bias.
          Var w = tape.constant({len, total_cf}, std::move(seg));
          Var cf_row = tape.linear(tape.reshape(cf_out, {1, total_cf}), w, tape.constant({1, len}, std::vector<double>(static_cast<std::size_t>(len), 0.0)));
          Var gap = tape.sub(tape.reshape(cf_row, {len, 1}), out);
          loss = tape.add(loss, tape.scale(tape.mean(tape.square(gap)), lambda));
        }
      }
      total += tape.scalar(loss) * len;
      auto grads = tape.backward(loss, pred.params());
      clip_grad_norm(grads, cfg.clip_norm);
      adam_step(pred.params(), grads, adam);
    }
    curve.push_back(total / n);
  }
  return curve;
}

// ---- explanations -----------------------------------------------------------

struct Explanation {
  double factual_prediction = 0.0;
  double counterfactual_prediction = 0.0;
  std::vector<std::string> nodes;
  std::vector<double> factual;
  std::vector<double> counterfactual_mean;
};

inline Explanation explain_sample(const CausalGraph& g, const Predictor& pred, std::span<const double> evidence,
                                  const Intervention& iv, const InferenceConfig& cfg) {
  const auto set = g.counterfactual(evidence, iv, cfg);
  Explanation e;
  Table fact(g.observed_names(), 1);
  std::copy(evidence.begin(), evidence.end(), fact.row(0).begin());
  e.factual_prediction = pred.predict(fact)[0];
  const auto y = pred.predict(set.rows);
  for (std::size_t i = 0; i < y.size(); ++i) e.counterfactual_prediction += set.weights[i] * y[i];
  e.nodes = g.observed_names();
  e.factual.assign(evidence.begin(), evidence.end());
  for (int c = 0; c < set.rows.cols(); ++c)
    e.counterfactual_mean.push_back(
        expectation_under(set, [c](std::span<const double> row) { return row[static_cast<std::size_t>(c)]; }));
  return e;
}

}  // namespace dcg
