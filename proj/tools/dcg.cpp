// dcg: command-line front end for deep causal graphs.
//
// Exit codes: 0 success, 1 unexpected failure, 2 bad flags, 3 bad input
// files, 4 numeric failure.

#include "dcg/dcg.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("DCG_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("DCG_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- run context: flags, inputs and manifest ------------------------------

struct Run {
  std::string command;
  CLI::App* app = nullptr;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void input(const std::string& path) { inputs.push_back(path); }

  [[nodiscard]] ordered_json flags() const {
    ordered_json j = ordered_json::object();
    for (const CLI::App* a = app; a; a = a->get_parent()) {
      for (const CLI::Option* opt : a->get_options()) {
        if (opt->get_name() == "--help" || opt->count() == 0) continue;
        const auto& res = opt->results();
        if (res.size() == 1)
          j[opt->get_name()] = res[0];
        else
          j[opt->get_name()] = res;
      }
    }
    return j;
  }

  void manifest(const std::string& out) const {
    ordered_json j;
    j["command"] = command;
    j["flags"] = flags();
    j["seed"] = seed;
    auto& in = j["inputs"] = ordered_json::array();
    for (const auto& p : inputs) in.push_back({{"path", p}, {"fnv1a", dcg::hex64(dcg::fnv1a(read_file(p)))}});
    j["version"] = kToolVersion;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream f(out + ".manifest.json", std::ios::binary);
    if (!f) throw InputError("cannot write manifest for '" + out + "'");
    f << j.dump(2) << "\n";
  }
};

void write_table(const std::string& path, const dcg::Table& t) {
  for (double x : t.data)
    if (!std::isfinite(x)) throw NumericError("refusing to write non-finite values to '" + path + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  dcg::write_csv(out, t);
}

void write_json(const std::string& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

dcg::Dataset load_data(Run& run, const std::string& path) {
  run.input(path);
  try {
    return dcg::load_csv(path);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

dcg::GraphSpec load_spec(Run& run, const std::string& path) {
  run.input(path);
  try {
    auto spec = dcg::load_graph_spec(path);
    (void)dcg::validate_and_order(spec);
    return spec;
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

dcg::LoadedCheckpoint load_ckpt(Run& run, const std::string& path) {
  run.input(path);
  try {
    return dcg::load_checkpoint(path);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

dcg::MLPPredictor load_predictor(Run& run, const std::string& path) {
  run.input(path);
  try {
    return dcg::MLPPredictor::load(path);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

dcg::Table view(const dcg::CausalGraph& g, const dcg::Dataset& d) {
  try {
    return dcg::graph_view(g, d);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

dcg::Intervention parse_do(const dcg::CausalGraph& g, const std::vector<std::string>& exprs) {
  dcg::Intervention iv;
  for (const auto& e : exprs) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == e.size())
      throw UsageError("cannot parse do-expression '" + e + "' (expected name=value)");
    const std::string name = e.substr(0, eq);
    double value = 0.0;
    if (!dcg::detail::parse_double(e.substr(eq + 1), value))
      throw UsageError("cannot parse value in do-expression '" + e + "'");
    try {
      const int idx = g.index_of(name);
      if (g.node(idx).confounder) throw UsageError("cannot intervene on confounder '" + name + "'");
      g.check_value(idx, value);
    } catch (const dcg::GraphError& err) {
      throw UsageError(err.what());
    } catch (const dcg::EvidenceError& err) {
      throw UsageError(err.what());
    }
    iv[name] = value;
  }
  return iv;
}

void require_node(const dcg::CausalGraph& g, const std::string& name) {
  try {
    (void)g.index_of(name);
  } catch (const dcg::GraphError& e) {
    throw UsageError(e.what());
  }
}

// Type-7 empirical quantile.
double quantile(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct MeanCI {
  double mean = 0, lo = 0, hi = 0;
};

MeanCI mean_ci(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
  const double half = 1.96 * std::sqrt(var / static_cast<double>(v.size()));
  return {m, m - half, m + half};
}

// ---- training flags shared by fit and eval --------------------------------

struct TrainFlags {
  dcg::TrainConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--epochs", cfg.epochs, "training epochs")->check(CLI::NonNegativeNumber);
    app->add_option("--batch-size", cfg.batch_size, "minibatch size")->check(CLI::PositiveNumber);
    app->add_option("--lr", cfg.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
    app->add_option("--mc", cfg.mc_samples, "confounder Monte-Carlo samples")->check(CLI::PositiveNumber);
    app->add_option("--clip", cfg.clip_norm, "gradient-norm clip")->check(CLI::PositiveNumber);
    app->add_option("--patience", cfg.patience, "early-stopping patience in epochs (0 = off)")
        ->check(CLI::NonNegativeNumber);
  }
};

// ---- commands ---------------------------------------------------------------

struct GenSalaryCmd {
  int n = 5000;
  double beta = dcg::kSalaryBeta;
  std::string out, spec_out, kind = "flow";

  void run(Run& r) const {
    if (n < 1) throw UsageError("--n must be >= 1");
    dcg::SalaryGenConfig cfg;
    cfg.n = n;
    cfg.seed = r.seed;
    cfg.beta = beta;
    const auto d = dcg::gen_salary(cfg);
    write_table(out, d.table);
    r.manifest(out);
    if (!spec_out.empty()) {
      dcg::UnitKind k;
      try {
        k = dcg::parse_unit_kind(kind);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      dcg::save_graph_spec(dcg::salary_graph_spec(k, r.seed), spec_out);
      r.manifest(spec_out);
    }
  }
};

struct CompleteGraphCmd {
  std::string data, kind = "flow", out;
  void run(Run& r) const {
    dcg::UnitKind k;
    try {
      k = dcg::parse_unit_kind(kind);
      if (k == dcg::UnitKind::Confounder || dcg::is_discrete_kind(k))
        throw std::invalid_argument("--kind must be a continuous unit kind");
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    const auto d = load_data(r, data);
    dcg::save_graph_spec(dcg::complete_graph_spec(d, k, r.seed), out);
    r.manifest(out);
  }
};

struct FitCmd {
  std::string graph, data, out, curve;
  TrainFlags tf;
  void run(Run& r) {
    auto spec = load_spec(r, graph);
    const auto d = load_data(r, data);
    dcg::CausalGraph g(spec, r.seed);
    const auto rows = view(g, d);
    tf.cfg.seed = r.seed;
    try {
      dcg::warm_start(g, rows);
    } catch (const dcg::DegenerateColumnError& e) {
      throw InputError(e.what());
    }
    std::vector<double> c;
    try {
      c = dcg::fit(g, rows, tf.cfg, [](int epoch, double nll) {
        if (epoch % 10 == 0) std::cerr << "epoch " << epoch << " nll " << nll << "\n";
      });
    } catch (const dcg::TrainingError& e) {
      std::ofstream lg(out + ".last-good.json", std::ios::binary);
      lg << e.last_good_checkpoint();
      throw NumericError(std::string(e.what()) + " (last good parameters in " + out + ".last-good.json)");
    }
    dcg::save_checkpoint(g, tf.cfg, out);
    r.manifest(out);
    if (!curve.empty()) {
      dcg::Table t({"epoch", "nll"}, static_cast<int>(c.size()));
      for (std::size_t i = 0; i < c.size(); ++i) {
        t.at(static_cast<int>(i), 0) = static_cast<double>(i);
        t.at(static_cast<int>(i), 1) = c[i];
      }
      write_table(curve, t);
      r.manifest(curve);
    }
  }
};

struct EvalCmd {
  std::string graph, data, checkpoint, out;
  int folds = 0;
  TrainFlags tf;
  void run(Run& r) {
    const auto d = load_data(r, data);
    tf.cfg.seed = r.seed;
    if (!checkpoint.empty()) {
      if (folds > 0) throw UsageError("--folds and --checkpoint are exclusive");
      auto ck = load_ckpt(r, checkpoint);
      const auto rows = view(ck.graph, d);
      const auto lk = ck.graph.loglk_values(rows, tf.cfg.mc_samples, r.seed);
      dcg::Table t({"rows", "mean_nll"}, 1);
      double s = 0;
      for (double x : lk) s -= x;
      t.at(0, 0) = rows.rows;
      t.at(0, 1) = s / rows.rows;
      write_table(out, t);
    } else {
      if (graph.empty()) throw UsageError("eval needs --checkpoint or --graph with --folds");
      if (folds < 2) throw UsageError("--folds must be >= 2");
      auto spec = load_spec(r, graph);
      spec.seed = r.seed;
      if (d.rows() < folds) throw UsageError("fewer rows than folds");
      dcg::CausalGraph probe(spec);
      const auto rows = view(probe, d);
      std::vector<dcg::FoldResult> res;
      try {
        res = dcg::cross_validate(spec, rows, folds, tf.cfg, &std::cerr);
      } catch (const dcg::TrainingError& e) {
        throw NumericError(e.what());
      } catch (const dcg::DegenerateColumnError& e) {
        throw InputError(e.what());
      }
      dcg::Table t({"fold", "train_rows", "test_rows", "test_nll"}, folds);
      for (int f = 0; f < folds; ++f) {
        t.at(f, 0) = f;
        t.at(f, 1) = res[static_cast<std::size_t>(f)].train_rows;
        t.at(f, 2) = res[static_cast<std::size_t>(f)].test_rows;
        t.at(f, 3) = res[static_cast<std::size_t>(f)].test_nll;
      }
      write_table(out, t);
    }
    r.manifest(out);
  }
};

struct SampleCmd {
  std::string checkpoint, out;
  int n = 1000;
  std::vector<std::string> dos;
  void run(Run& r) {
    auto ck = load_ckpt(r, checkpoint);
    const auto iv = parse_do(ck.graph, dos);
    write_table(out, ck.graph.sample(n, r.seed, iv));
    r.manifest(out);
  }
};

struct IntervenCmd {
  std::string checkpoint, data, out, obs_out, target, predictor;
  int n = 1000;
  std::vector<std::string> dos, sweep;
  void run(Run& r) {
    auto ck = load_ckpt(r, checkpoint);
    const auto& g = ck.graph;
    const auto iv = parse_do(g, dos);
    if (sweep.empty()) {
      write_table(out, g.sample(n, r.seed, iv));
      r.manifest(out);
      return;
    }
    if (sweep.size() != 4) throw UsageError("--quantile-sweep takes: node lo hi steps");
    const std::string node = sweep[0];
    double lo = 0, hi = 0, steps_d = 0;
    if (!dcg::detail::parse_double(sweep[1], lo) || !dcg::detail::parse_double(sweep[2], hi) ||
        !dcg::detail::parse_double(sweep[3], steps_d) || steps_d < 1 || steps_d != std::floor(steps_d) ||
        lo < 0 || hi > 1 || lo > hi)
      throw UsageError("bad --quantile-sweep bounds (need 0 <= lo <= hi <= 1, integer steps >= 1)");
    const int steps = static_cast<int>(steps_d);
    require_node(g, node);
    if (data.empty()) throw UsageError("--quantile-sweep needs --data for empirical quantiles");
    const auto d = load_data(r, data);
    const auto rows = view(g, d);
    const int node_col = g.observed_position(node);
    const bool node_discrete = g.unit(g.index_of(node)).discrete();
    std::string tgt = target.empty() ? g.observed_names().back() : target;
    require_node(g, tgt);
    std::optional<dcg::MLPPredictor> pred;
    if (!predictor.empty()) pred = load_predictor(r, predictor);
    auto response = [&](const dcg::Table& t) {
      if (pred) return pred->predict(t);
      return t.column(tgt);
    };

    const auto xs = rows.column(node_col);
    std::vector<int> sorted(static_cast<std::size_t>(rows.rows));
    std::iota(sorted.begin(), sorted.end(), 0);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [&](int a, int b) { return xs[static_cast<std::size_t>(a)] < xs[static_cast<std::size_t>(b)]; });
    const double h = steps > 1 ? (hi - lo) / (steps - 1) : 0.05;
    const auto obs_y = response(rows);

    dcg::Table sweep_t({"quantile", "value", "mean", "ci_low", "ci_high"}, steps);
    dcg::Table obs_t({"quantile", "value", "mean", "ci_low", "ci_high", "count"}, steps);
    for (int i = 0; i < steps; ++i) {
      const double q = steps > 1 ? lo + i * h : lo;
      double v = quantile(xs, q);
      if (node_discrete) v = std::round(v);
      auto civ = iv;
      civ[node] = v;
      const auto samples = g.sample(n, dcg::derive_seed(r.seed, {static_cast<std::uint64_t>(i)}), civ);
      const auto ci = mean_ci(response(samples));
      sweep_t.at(i, 0) = q;
      sweep_t.at(i, 1) = v;
      sweep_t.at(i, 2) = ci.mean;
      sweep_t.at(i, 3) = ci.lo;
      sweep_t.at(i, 4) = ci.hi;

      const int n_rows = rows.rows;
      const int a = std::clamp(static_cast<int>(std::floor((q - h / 2) * n_rows)), 0, n_rows - 1);
      const int b = std::clamp(static_cast<int>(std::ceil((q + h / 2) * n_rows)), a + 1, n_rows);
      std::vector<double> bin;
      for (int k = a; k < b; ++k) bin.push_back(obs_y[static_cast<std::size_t>(sorted[static_cast<std::size_t>(k)])]);
      const auto oci = mean_ci(bin);
      obs_t.at(i, 0) = q;
      obs_t.at(i, 1) = v;
      obs_t.at(i, 2) = oci.mean;
      obs_t.at(i, 3) = oci.lo;
      obs_t.at(i, 4) = oci.hi;
      obs_t.at(i, 5) = static_cast<double>(bin.size());
    }
    write_table(out, sweep_t);
    r.manifest(out);
    const std::string obs_path = obs_out.empty() ? out + ".observational.csv" : obs_out;
    write_table(obs_path, obs_t);
    r.manifest(obs_path);
  }
};

struct CounterfactualCmd {
  std::string checkpoint, data, out, summary, predictor;
  int row = 0, n = 100, m = 100;
  std::vector<std::string> dos;
  void run(Run& r) {
    auto ck = load_ckpt(r, checkpoint);
    const auto& g = ck.graph;
    const auto iv = parse_do(g, dos);
    const auto d = load_data(r, data);
    const auto rows = view(g, d);
    if (row < 0 || row >= rows.rows) throw UsageError("--row out of range (data has " + std::to_string(rows.rows) + " rows)");
    std::optional<dcg::MLPPredictor> pred;
    if (!predictor.empty()) pred = load_predictor(r, predictor);
    dcg::InferenceConfig ic;
    ic.cf_samples = n;
    ic.mc_samples = m;
    ic.seed = r.seed;
    dcg::CounterfactualSet set;
    try {
      set = g.counterfactual(rows.row(row), iv, ic);
    } catch (const dcg::EvidenceError& e) {
      throw NumericError(e.what());
    }
    auto cols = g.observed_names();
    cols.push_back("weight");
    cols.push_back("draw");
    std::vector<double> preds;
    if (pred) {
      cols.push_back("prediction");
      preds = pred->predict(set.rows);
    }
    dcg::Table t(cols, 0);
    for (int i = 0; i < set.rows.rows; ++i) {
      std::vector<double> line(set.rows.row(i).begin(), set.rows.row(i).end());
      line.push_back(set.weights[static_cast<std::size_t>(i)]);
      line.push_back(set.draw[static_cast<std::size_t>(i)]);
      if (pred) line.push_back(preds[static_cast<std::size_t>(i)]);
      t.append_row(line);
    }
    write_table(out, t);
    r.manifest(out);

    ordered_json s;
    s["row"] = row;
    ordered_json ivj = ordered_json::object();
    for (const auto& [k, v] : iv) ivj[k] = v;
    s["intervention"] = ivj;
    s["samples"] = set.rows.rows;
    auto& feats = s["features"] = ordered_json::array();
    const auto names = g.observed_names();
    for (std::size_t c = 0; c < names.size(); ++c) {
      const double fact = rows.at(row, static_cast<int>(c));
      const double cf = dcg::expectation_under(set, [c](std::span<const double> x) { return x[c]; });
      feats.push_back({{"node", names[c]}, {"factual", fact}, {"counterfactual_mean", cf}, {"delta", cf - fact}});
    }
    if (pred) {
      dcg::Table fact(g.observed_names(), 1);
      std::copy(rows.row(row).begin(), rows.row(row).end(), fact.row(0).begin());
      const double y = pred->predict(fact)[0];
      double yc = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) yc += set.weights[i] * preds[i];
      s["factual_prediction"] = y;
      s["counterfactual_prediction"] = yc;
    }
    const std::string spath = summary.empty() ? out + ".summary.json" : summary;
    write_json(spath, s);
    r.manifest(spath);
  }
};

struct FairnessCmd {
  std::string mode, checkpoint, data, protected_node, target, predictor, black_box, out, report;
  std::vector<std::string> features;
  std::vector<double> values;
  double lambda = 1.0, test_fraction = 0.2;
  int max_rows = 0, n_cf = 5, mc = 100, epochs = 200, batch = 128, eval_cf = 20;
  double lr = 1e-3;

  dcg::Table subset(const dcg::Table& t) const {
    if (max_rows <= 0 || max_rows >= t.rows) return t;
    std::vector<int> idx(static_cast<std::size_t>(max_rows));
    std::iota(idx.begin(), idx.end(), 0);
    return t.select_rows(idx);
  }

  void run(Run& r) {
    auto ck = load_ckpt(r, checkpoint);
    const auto& g = ck.graph;
    require_node(g, protected_node);
    const dcg::ProtectedPolicy policy{protected_node, values};
    try {
      dcg::check_protected(g, policy);
    } catch (const dcg::FairnessError& e) {
      throw UsageError(e.what());
    }
    const auto d = load_data(r, data);
    const auto rows = view(g, d);
    dcg::InferenceConfig ic;
    ic.cf_samples = eval_cf;
    ic.mc_samples = mc;
    ic.seed = r.seed;

    if (mode == "audit") {
      const auto eval_rows = subset(rows);
      ordered_json rep;
      if (!black_box.empty()) {
        if (features.empty()) throw UsageError("--black-box-batch needs --features");
        for (const auto& f : features) require_node(g, f);
        const fs::path dir(black_box);
        const fs::path in_path = dir / "cf-inputs.csv", pred_path = dir / "cf-preds.csv";
        if (!fs::exists(pred_path)) {
          fs::create_directories(dir);
          write_table(in_path.string(), dcg::black_box_inputs(g, features, policy, eval_rows, ic));
          r.manifest(in_path.string());
          std::cerr << "wrote " << in_path.string() << "; score it into " << pred_path.string()
                    << " (row_id,cf_id,prediction) and rerun\n";
          return;
        }
        dcg::Table in_t, pred_t;
        r.input(in_path.string());
        r.input(pred_path.string());
        try {
          std::ifstream a(in_path), b(pred_path);
          in_t = dcg::read_csv_table(a, in_path.string());
          pred_t = dcg::read_csv_table(b, pred_path.string());
        } catch (const std::exception& e) {
          throw InputError(e.what());
        }
        dcg::CUResult res;
        try {
          res = dcg::cu_from_black_box(in_t, pred_t);
        } catch (const std::exception& e) {
          throw InputError(e.what());
        }
        if (static_cast<int>(res.factual.size()) > eval_rows.rows)
          throw InputError("black-box batch covers more rows than the data");
        dcg::FairnessReport fr;
        fr.protected_node = protected_node;
        fr.policy = values.empty() ? "complement" : "values";
        fr.samples = static_cast<int>(res.factual.size());
        fr.cu1 = res.cu(1);
        fr.cu2 = res.cu(2);
        if (!target.empty()) {
          require_node(g, target);
          std::vector<int> idx(res.factual.size());
          std::iota(idx.begin(), idx.end(), 0);
          const auto used = eval_rows.select_rows(idx);
          const auto y = used.column(target);
          for (std::size_t i = 0; i < y.size(); ++i) fr.mse += (res.factual[i] - y[i]) * (res.factual[i] - y[i]);
          fr.mse /= static_cast<double>(y.size());
          fr.spearman = dcg::spearman_by_group(res.factual, y, used.column(protected_node));
        }
        rep = dcg::to_json(fr);
      } else {
        if (predictor.empty()) throw UsageError("audit needs --predictor or --black-box-batch");
        const auto p = load_predictor(r, predictor);
        rep = dcg::to_json(dcg::fairness_report(g, p, policy, p.target(), eval_rows, ic));
      }
      write_json(out, rep);
      r.manifest(out);
      return;
    }

    // train
    if (target.empty()) throw UsageError("fairness train needs --target");
    require_node(g, target);
    if (lambda < 0) throw UsageError("--lambda must be >= 0");
    auto feats = features;
    if (feats.empty())
      for (const auto& nme : g.observed_names())
        if (nme != target) feats.push_back(nme);
    for (const auto& f : feats) require_node(g, f);
    const auto all = subset(rows);
    const int n_test = std::max(1, static_cast<int>(std::round(test_fraction * all.rows)));
    if (all.rows - n_test < 2) throw UsageError("not enough rows for a train/test split");
    const auto perm = dcg::seeded_permutation(all.rows, dcg::derive_seed(r.seed, {0x5B17ULL}));
    std::vector<int> tr(perm.begin() + n_test, perm.end()), te(perm.begin(), perm.begin() + n_test);
    const auto train_rows = all.select_rows(tr), test_rows = all.select_rows(te);
    dcg::FairConfig fc;
    fc.epochs = epochs;
    fc.batch_size = batch;
    fc.learning_rate = lr;
    fc.n_cf = n_cf;
    fc.mc_samples = mc;
    fc.seed = r.seed;
    dcg::MLPPredictor base(feats, target), fair(feats, target);
    dcg::train_fair(g, base, policy, 0.0, train_rows, fc);
    dcg::train_fair(g, fair, policy, lambda, train_rows, fc);
    auto before = dcg::fairness_report(g, base, policy, target, test_rows, ic);
    auto after = dcg::fairness_report(g, fair, policy, target, test_rows, ic);
    after.lambda = lambda;
    fair.save(out);
    r.manifest(out);
    ordered_json rep;
    rep["before"] = dcg::to_json(before);
    rep["after"] = dcg::to_json(after);
    rep["cu1_reduction"] = before.cu1 > 0 ? 1.0 - after.cu1 / before.cu1 : 0.0;
    const std::string rpath = report.empty() ? out + ".report.json" : report;
    write_json(rpath, rep);
    r.manifest(rpath);
  }
};

struct SanityCmd {
  std::string checkpoint, data, node, condition_on, out;
  std::vector<double> grid;
  int steps = 5, n = 500, points = 200;
  void run(Run& r) {
    auto ck = load_ckpt(r, checkpoint);
    const auto& g = ck.graph;
    require_node(g, node);
    require_node(g, condition_on);
    if (g.node(g.index_of(node)).confounder || g.node(g.index_of(condition_on)).confounder)
      throw UsageError("sanity curves need observable nodes");
    if (node == condition_on) throw UsageError("--node and --condition-on must differ");
    std::vector<double> values = grid;
    const int cidx = g.index_of(condition_on);
    if (values.empty()) {
      if (data.empty()) throw UsageError("give --grid or --data to derive quantile grid values");
      const auto d = load_data(r, data);
      const auto rows = view(g, d);
      const auto col = rows.column(g.observed_position(condition_on));
      for (int i = 0; i < steps; ++i) {
        const double q = steps > 1 ? 0.1 + 0.8 * i / (steps - 1) : 0.5;
        double v = quantile(col, q);
        if (g.unit(cidx).discrete()) v = std::round(v);
        values.push_back(v);
      }
    }
    for (double v : values) {
      try {
        g.check_value(cidx, v);
      } catch (const dcg::EvidenceError& e) {
        throw UsageError(e.what());
      }
    }
    const int k = g.index_of(node);
    const bool discrete = g.unit(k).discrete();
    std::vector<double> xs;
    if (!discrete) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto s = g.sample(n, dcg::derive_seed(r.seed, {0x6A1DULL, i}), {{condition_on, values[i]}});
        for (double x : s.column(g.observed_position(node))) {
          lo = std::min(lo, x);
          hi = std::max(hi, x);
        }
      }
      const double pad = 0.25 * (hi - lo) + 1e-9;
      lo -= pad;
      hi += pad;
      for (int i = 0; i < points; ++i) xs.push_back(lo + (hi - lo) * i / (points - 1));
    }
    dcg::Table t({"condition_value", "x", discrete ? "probability" : "density"}, 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::vector<double> dens;
      try {
        dens = dcg::interventional_density(g, node, {{condition_on, values[i]}}, xs, n,
                                           dcg::derive_seed(r.seed, {0xDE5ULL, i}));
      } catch (const dcg::GraphError& e) {
        throw UsageError(e.what());
      }
      for (std::size_t j = 0; j < dens.size(); ++j) {
        const double x = discrete ? static_cast<double>(j) : xs[j];
        const double line[3] = {values[i], x, dens[j]};
        t.append_row(line);
      }
    }
    write_table(out, t);
    r.manifest(out);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep causal graphs: fit, evaluate, sample, intervene, counterfactuals, fairness"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  Run run;
  std::optional<std::uint64_t> seed_flag;
  app.add_option("--seed", seed_flag, "random seed (default: $DCG_SEED or 0)");

  GenSalaryCmd gen;
  auto* c_gen = app.add_subcommand("gen-salary", "generate the synthetic salary dataset");
  c_gen->add_option("--n", gen.n, "rows");
  c_gen->add_option("--beta", gen.beta, "selection-bias strength")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--out", gen.out, "output CSV")->required();
  c_gen->add_option("--spec-out", gen.spec_out, "also write the graph spec for fitting");
  c_gen->add_option("--kind", gen.kind, "continuous unit kind in the written spec");

  CompleteGraphCmd cg;
  auto* c_cg = app.add_subcommand("complete-graph", "write a complete-graph spec for a CSV");
  c_cg->add_option("--data", cg.data, "input CSV")->required();
  c_cg->add_option("--kind", cg.kind, "unit kind for continuous columns (flow|normal|ald|glm)");
  c_cg->add_option("--out", cg.out, "output spec JSON")->required();

  FitCmd fit;
  auto* c_fit = app.add_subcommand("fit", "train a graph on data");
  c_fit->add_option("--graph", fit.graph, "graph spec JSON")->required();
  c_fit->add_option("--data", fit.data, "training CSV")->required();
  c_fit->add_option("--out", fit.out, "checkpoint path")->required();
  c_fit->add_option("--curve", fit.curve, "per-epoch training nll CSV");
  fit.tf.add(c_fit);

  EvalCmd ev;
  auto* c_ev = app.add_subcommand("eval", "k-fold cross-validated or checkpoint test nll");
  c_ev->add_option("--data", ev.data, "CSV")->required();
  c_ev->add_option("--graph", ev.graph, "graph spec JSON (with --folds)");
  c_ev->add_option("--folds", ev.folds, "number of folds");
  c_ev->add_option("--checkpoint", ev.checkpoint, "evaluate a trained checkpoint instead");
  c_ev->add_option("--out", ev.out, "nll CSV")->required();
  ev.tf.add(c_ev);

  SampleCmd sm;
  auto* c_sm = app.add_subcommand("sample", "ancestral samples, optionally under do()");
  c_sm->add_option("--checkpoint", sm.checkpoint, "checkpoint")->required();
  c_sm->add_option("--n", sm.n, "samples")->check(CLI::PositiveNumber);
  c_sm->add_option("--do", sm.dos, "intervention name=value (repeatable)");
  c_sm->add_option("--out", sm.out, "output CSV")->required();

  IntervenCmd iv;
  auto* c_iv = app.add_subcommand("intervene", "interventional samples or quantile sweeps");
  c_iv->add_option("--checkpoint", iv.checkpoint, "checkpoint")->required();
  c_iv->add_option("--do", iv.dos, "intervention name=value (repeatable)");
  c_iv->add_option("--n", iv.n, "samples per setting")->check(CLI::PositiveNumber);
  c_iv->add_option("--quantile-sweep", iv.sweep, "node lo hi steps")->expected(4);
  c_iv->add_option("--data", iv.data, "CSV for empirical quantiles and observational curve");
  c_iv->add_option("--target", iv.target, "node whose mean is reported (default: last node)");
  c_iv->add_option("--predictor", iv.predictor, "report mean prediction of this predictor instead");
  c_iv->add_option("--obs-out", iv.obs_out, "observational curve CSV");
  c_iv->add_option("--out", iv.out, "output CSV")->required();

  CounterfactualCmd cf;
  auto* c_cf = app.add_subcommand("counterfactual", "counterfactual rows for one data row");
  c_cf->add_option("--checkpoint", cf.checkpoint, "checkpoint")->required();
  c_cf->add_option("--data", cf.data, "CSV holding the evidence row")->required();
  c_cf->add_option("--row", cf.row, "0-based row index")->required();
  c_cf->add_option("--do", cf.dos, "intervention name=value (repeatable)");
  c_cf->add_option("--n", cf.n, "counterfactual rows")->check(CLI::PositiveNumber);
  c_cf->add_option("--m", cf.m, "confounder draws")->check(CLI::PositiveNumber);
  c_cf->add_option("--predictor", cf.predictor, "predictor JSON");
  c_cf->add_option("--summary", cf.summary, "summary JSON path");
  c_cf->add_option("--out", cf.out, "output CSV")->required();

  FairnessCmd fr;
  auto* c_fr = app.add_subcommand("fairness", "counterfactual fairness audit or CU2-regularized training");
  c_fr->add_option("mode", fr.mode, "audit | train")->required()->check(CLI::IsMember({"audit", "train"}));
  c_fr->add_option("--checkpoint", fr.checkpoint, "graph checkpoint")->required();
  c_fr->add_option("--data", fr.data, "CSV")->required();
  c_fr->add_option("--protected", fr.protected_node, "protected node")->required();
  c_fr->add_option("--values", fr.values, "intervention values for non-binary protected nodes");
  c_fr->add_option("--target", fr.target, "target node");
  c_fr->add_option("--features", fr.features, "predictor features (default: all but target)")->delimiter(',');
  c_fr->add_option("--predictor", fr.predictor, "predictor JSON to audit");
  c_fr->add_option("--black-box-batch", fr.black_box, "directory for the cf-inputs/cf-preds protocol");
  c_fr->add_option("--lambda", fr.lambda, "CU2 weight");
  c_fr->add_option("--max-rows", fr.max_rows, "use only the first N data rows");
  c_fr->add_option("--n-cf", fr.n_cf, "counterfactuals per training row")->check(CLI::PositiveNumber);
  c_fr->add_option("--eval-cf", fr.eval_cf, "counterfactuals per audited row")->check(CLI::PositiveNumber);
  c_fr->add_option("--mc", fr.mc, "confounder draws")->check(CLI::PositiveNumber);
  c_fr->add_option("--epochs", fr.epochs, "predictor epochs")->check(CLI::NonNegativeNumber);
  c_fr->add_option("--batch-size", fr.batch, "predictor minibatch")->check(CLI::PositiveNumber);
  c_fr->add_option("--lr", fr.lr, "predictor learning rate")->check(CLI::PositiveNumber);
  c_fr->add_option("--test-fraction", fr.test_fraction, "held-out fraction")->check(CLI::Range(0.0, 0.9));
  c_fr->add_option("--report", fr.report, "report JSON path (train)");
  c_fr->add_option("--out", fr.out, "report JSON (audit) or predictor JSON (train)");

  SanityCmd sn;
  auto* c_sn = app.add_subcommand("sanity", "density curves of a node under interventions on another");
  c_sn->add_option("--checkpoint", sn.checkpoint, "checkpoint")->required();
  c_sn->add_option("--node", sn.node, "node whose density is plotted")->required();
  c_sn->add_option("--condition-on", sn.condition_on, "intervened ancestor")->required();
  c_sn->add_option("--grid", sn.grid, "intervention values")->delimiter(',');
  c_sn->add_option("--data", sn.data, "CSV for a quantile grid when --grid is absent");
  c_sn->add_option("--steps", sn.steps, "quantile grid size")->check(CLI::PositiveNumber);
  c_sn->add_option("--n", sn.n, "Monte-Carlo samples per curve")->check(CLI::PositiveNumber);
  c_sn->add_option("--points", sn.points, "value grid points")->check(CLI::Range(2, 100000));
  c_sn->add_option("--out", sn.out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    run.seed = seed_flag ? *seed_flag : default_seed();
    for (auto* sub : app.get_subcommands()) {
      run.command = sub->get_name();
      run.app = sub;
    }
    if (run.command == "fairness" && fr.out.empty()) throw UsageError("fairness needs --out");
    if (c_gen->parsed()) gen.run(run);
    else if (c_cg->parsed()) cg.run(run);
    else if (c_fit->parsed()) fit.run(run);
    else if (c_ev->parsed()) ev.run(run);
    else if (c_sm->parsed()) sm.run(run);
    else if (c_iv->parsed()) iv.run(run);
    else if (c_cf->parsed()) cf.run(run);
    else if (c_fr->parsed()) fr.run(run);
    else if (c_sn->parsed()) sn.run(run);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::TrainingError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::DomainError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::UnitError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::FlowStabilityError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::InversionRangeError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const dcg::EvidenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
