#pragma once

// Joint maximum-likelihood training, warm start, k-fold evaluation and
// checkpoints ("dcg-ckpt/1").

#include "dcg/data.hpp"
#include "dcg/graph.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr const char* kCheckpointVersion = "dcg-ckpt/1";

struct TrainConfig {
  int epochs = 300;
  int batch_size = 128;
  double learning_rate = 1e-3;
  int mc_samples = 100;
  std::uint64_t seed = 0;
  double clip_norm = 10.0;
  int patience = 0;  // 0 disables early stopping

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (mc_samples < 1) throw std::invalid_argument("M must be >= 1");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("gradient clip must be > 0");
    if (patience < 0) throw std::invalid_argument("patience must be >= 0");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["mc_samples"] = c.mc_samples;
  j["seed"] = c.seed;
  j["clip_norm"] = c.clip_norm;
  j["patience"] = c.patience;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.seed = j.value("seed", c.seed);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.patience = j.value("patience", c.patience);
  return c;
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch, int batch, std::string last_good)
      : std::runtime_error(what), epoch_(epoch), batch_(batch), last_good_(std::move(last_good)) {}
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] int batch() const { return batch_; }
  // Checkpoint document of the parameters before the failing step.
  [[nodiscard]] const std::string& last_good_checkpoint() const { return last_good_; }

 private:
  int epoch_;
  int batch_;
  std::string last_good_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- checkpoints ----------------------------------------------------------

inline nlohmann::ordered_json checkpoint_json(const CausalGraph& g, const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["spec_hash"] = spec_hash(g.spec());
  j["spec"] = to_json(g.spec());
  auto& params = j["params"] = nlohmann::ordered_json::object();
  for (const auto& p : g.params()) {
    nlohmann::ordered_json jp;
    jp["rows"] = p.shape.rows;
    jp["cols"] = p.shape.cols;
    jp["values"] = p.value;
    params[p.name] = std::move(jp);
  }
  auto& norms = j["normalizers"] = nlohmann::ordered_json::object();
  for (int i = 0; i < g.node_count(); ++i) {
    const auto& u = g.unit(i);
    if (!u.has_normalizer()) continue;
    norms[u.name()] = {{"loc", u.normalizer.loc}, {"scale", u.normalizer.scale}};
  }
  j["train_config"] = to_json(cfg);
  return j;
}

inline std::string dump_checkpoint(const CausalGraph& g, const TrainConfig& cfg) {
  return checkpoint_json(g, cfg).dump(1) + "\n";
}

inline void save_checkpoint(const CausalGraph& g, const TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << dump_checkpoint(g, cfg);
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

struct LoadedCheckpoint {
  CausalGraph graph;
  TrainConfig config;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (!j.is_object()) throw CheckpointError("malformed checkpoint: not an object");
    const auto version = j.at("version").get<std::string>();
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint version '" + version + "' is not " + kCheckpointVersion);
    GraphSpec spec = graph_spec_from_json(j.at("spec"));
    const auto stored = j.at("spec_hash").get<std::string>();
    if (stored != spec_hash(spec))
      throw CheckpointError("checkpoint graph-spec hash mismatch (stored " + stored + ", computed " +
                            spec_hash(spec) + ")");
    LoadedCheckpoint ck{CausalGraph(std::move(spec)), train_config_from_json(j.at("train_config"))};
    const auto& params = j.at("params");
    if (params.size() != ck.graph.params().size())
      throw CheckpointError("checkpoint has " + std::to_string(params.size()) + " parameters, graph expects " +
                            std::to_string(ck.graph.params().size()));
    for (auto& p : ck.graph.params()) {
      const auto& jp = params.at(p.name);
      if (jp.at("rows").get<int>() != p.shape.rows || jp.at("cols").get<int>() != p.shape.cols)
        throw CheckpointError("parameter '" + p.name + "' has the wrong shape");
      auto values = jp.at("values").get<std::vector<double>>();
      if (values.size() != p.value.size())
        throw CheckpointError("parameter '" + p.name + "' has the wrong length");
      p.value = std::move(values);
    }
    const auto& norms = j.at("normalizers");
    for (int i = 0; i < ck.graph.node_count(); ++i) {
      auto& u = ck.graph.unit(i);
      if (!u.has_normalizer()) continue;
      const auto& jn = norms.at(u.name());
      u.normalizer.loc = jn.at("loc").get<double>();
      u.normalizer.scale = jn.at("scale").get<double>();
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const GraphError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// Dataset columns in the graph's observed order: discrete nodes read the
// categorical codes, continuous nodes the original values.
inline Table graph_view(const CausalGraph& g, const Dataset& d) {
  Table out(g.observed_names(), d.rows());
  const auto& obs = g.observed();
  for (std::size_t j = 0; j < obs.size(); ++j) {
    const auto& u = g.unit(obs[j]);
    const int c = d.table.index_of(u.name());
    if (c < 0) throw EvidenceError("data has no column for node '" + u.name() + "'");
    const auto& info = d.info[static_cast<std::size_t>(c)];
    if (u.discrete() && !info.categorical)
      throw EvidenceError("node '" + u.name() + "' is discrete but column is continuous");
    if (u.discrete() && info.classes() > u.classes())
      throw EvidenceError("column '" + u.name() + "' has " + std::to_string(info.classes()) +
                          " levels, node expects " + std::to_string(u.classes()));
    for (int r = 0; r < d.rows(); ++r) {
      double x = d.table.at(r, c);
      if (info.categorical && !u.discrete()) x = info.levels[static_cast<std::size_t>(static_cast<int>(x))];
      out.at(r, static_cast<int>(j)) = x;
    }
  }
  return out;
}

// ---- training -------------------------------------------------------------

// Fisher-Yates over 0..n-1 driven by our own generator, so the permutation
// does not depend on the standard library's shuffle.
inline std::vector<int> seeded_permutation(int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

// Fits location/scale of every continuous unit to its data column.
inline void warm_start(CausalGraph& g, const Table& data) {
  const Table rows = g.align(data);
  if (rows.rows < 2) throw std::invalid_argument("warm start needs at least 2 rows");
  const auto& obs = g.observed();
  for (std::size_t j = 0; j < obs.size(); ++j) {
    auto& u = g.unit(obs[j]);
    if (!u.has_normalizer()) continue;
    u.normalizer = Normalizer::fit(rows.column(static_cast<int>(j)), u.name());
  }
}

using EpochCallback = std::function<void(int epoch, double nll)>;

// Minibatch Adam on the mean negative graph log-likelihood. Returns the mean
// training nll of every epoch.
inline std::vector<double> fit(CausalGraph& g, const Table& data, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const Table rows = g.align(data);
  g.check_rows(rows);
  const int n = rows.rows;
  const int batch = std::min(cfg.batch_size, n);
  const int batches = (n + batch - 1) / batch;
  const AdamConfig adam{cfg.learning_rate};
  g.params().reset_optimizer();
  std::vector<double> curve;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = seeded_permutation(n, derive_seed(cfg.seed, {0xE90CULL, static_cast<std::uint64_t>(epoch)}));
    double total = 0.0;
    for (int b = 0; b < batches; ++b) {
      const int start = b * batch;
      const int len = std::min(batch, n - start);
      const Table mb = rows.select_rows(std::span<const int>(perm).subspan(static_cast<std::size_t>(start),
                                                                           static_cast<std::size_t>(len)));
      const std::uint64_t bseed =
          derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)});
      Gradients grads;
      double loss = 0.0;
      try {
        Tape tape;
        Var lk = g.loglk_given(tape, mb, g.draw_confounders(len, g.has_confounders() ? cfg.mc_samples : 1, bseed));
        Var obj = tape.neg(tape.mean(lk));
        loss = tape.scalar(obj);
        if (!std::isfinite(loss)) throw DomainError("loss", "non-finite value");
        grads = tape.backward(obj, g.params());
      } catch (const DomainError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what() + " at epoch " +
                                std::to_string(epoch) + ", batch " + std::to_string(b),
                            epoch, b, dump_checkpoint(g, cfg));
      } catch (const UnitError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what() + " at epoch " +
                                std::to_string(epoch) + ", batch " + std::to_string(b),
                            epoch, b, dump_checkpoint(g, cfg));
      }
      const double norm = clip_grad_norm(grads, cfg.clip_norm);
      if (!std::isfinite(norm))
        throw TrainingError("training diverged: non-finite gradient at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(b),
                            epoch, b, dump_checkpoint(g, cfg));
      adam_step(g.params(), grads, adam);
      total += loss * len;
    }
    const double nll = total / n;
    curve.push_back(nll);
    if (on_epoch) on_epoch(epoch, nll);
    if (cfg.patience > 0) {
      if (nll < best - 1e-9) {
        best = nll;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return curve;
}

// ---- k-fold evaluation ----------------------------------------------------

// Fold id of every row after a seeded shuffle; fold sizes differ by at most 1.
inline std::vector<int> fold_assignment(int n, int folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("need at least 2 folds");
  if (n < folds) throw std::invalid_argument("fewer rows than folds");
  const auto perm = seeded_permutation(n, derive_seed(seed, {0xF01DULL}));
  std::vector<int> fold(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) fold[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i % folds;
  return fold;
}

struct FoldResult {
  int fold = 0;
  int train_rows = 0;
  int test_rows = 0;
  double test_nll = 0.0;
  double final_train_nll = 0.0;
};

// Per fold: fresh graph from the spec, warm start and fit on the other
// folds, mean nll on the held-out fold.
inline std::vector<FoldResult> cross_validate(const GraphSpec& spec, const Table& data, int folds,
                                              TrainConfig cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const auto assign = fold_assignment(data.rows, folds, cfg.seed);
  std::vector<FoldResult> out;
  for (int f = 0; f < folds; ++f) {
    std::vector<int> train, test;
    for (int i = 0; i < data.rows; ++i)
      (assign[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    TrainConfig fc = cfg;
    if (static_cast<int>(test.size()) < fc.batch_size) {
      fc.batch_size = static_cast<int>(test.size());
      if (log)
        *log << "warning: fold " << f << " has " << test.size() << " rows, shrinking batch size to "
             << fc.batch_size << "\n";
    }
    fc.seed = derive_seed(cfg.seed, {0xF0ULL, static_cast<std::uint64_t>(f)});
    CausalGraph g(spec);
    const Table tr = data.select_rows(train);
    const Table te = data.select_rows(test);
    warm_start(g, tr);
    const auto curve = fit(g, tr, fc);
    FoldResult r;
    r.fold = f;
    r.train_rows = tr.rows;
    r.test_rows = te.rows;
    r.test_nll = g.mean_nll(g.align(te), cfg.mc_samples, derive_seed(fc.seed, {0x7E57ULL}));
    r.final_train_nll = curve.empty() ? std::nan("") : curve.back();
    if (log) *log << "fold " << f << ": test nll " << r.test_nll << "\n";
    out.push_back(r);
  }
  return out;
}

}  // namespace dcg
