#pragma once

// Deep causal graph: a DAG of causal units with optional latent confounders.
//
// Rows handed to the graph are laid out in "observed order": the
// declaration order of every non-confounder node. Internally the graph works
// on "full" tables with one column per node (confounders included).

#include "dcg/autodiff.hpp"
#include "dcg/flows.hpp"
#include "dcg/graph_spec.hpp"
#include "dcg/random.hpp"
#include "dcg/table.hpp"
#include "dcg/units.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EvidenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Intervention = std::map<std::string, double>;

struct InferenceConfig {
  int mc_samples = 100;  // M: confounder Monte-Carlo draws
  int cf_samples = 100;  // N: counterfactual rows
  std::uint64_t seed = 0;
};

struct CounterfactualSet {
  Table rows;                         // N x observed
  std::vector<double> weights;        // per row, sums to 1
  std::vector<int> draw;              // confounder draw behind each row, -1 if none
  std::vector<double> draw_weights;   // softmax of log p(v | u_j); empty without confounders
  int mc_samples = 0;

  [[nodiscard]] int size() const { return rows.rows; }
};

inline double expectation_under(const CounterfactualSet& set,
                                const std::function<double(std::span<const double>)>& f) {
  double acc = 0.0;
  for (int i = 0; i < set.rows.rows; ++i)
    acc += set.weights[static_cast<std::size_t>(i)] * f(set.rows.row(i));
  return acc;
}

// Topological order by Kahn's algorithm; among ready nodes the earliest
// declared goes first. Throws GraphError on unknown parents or cycles.
inline std::vector<int> validate_and_order(const GraphSpec& spec) {
  const int n = static_cast<int>(spec.nodes.size());
  std::map<std::string, int> index;
  for (int i = 0; i < n; ++i) {
    const auto& name = spec.nodes[static_cast<std::size_t>(i)].name;
    if (name.empty()) throw GraphError("node with empty name");
    if (!index.emplace(name, i).second) throw GraphError("duplicate node name '" + name + "'");
  }
  std::vector<std::vector<int>> parents(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& node = spec.nodes[static_cast<std::size_t>(i)];
    for (const auto& p : node.parents) {
      auto it = index.find(p);
      if (it == index.end())
        throw GraphError("node '" + node.name + "' names unknown parent '" + p + "'");
      if (std::find(parents[static_cast<std::size_t>(i)].begin(),
                    parents[static_cast<std::size_t>(i)].end(),
                    it->second) != parents[static_cast<std::size_t>(i)].end())
        throw GraphError("node '" + node.name + "' lists parent '" + p + "' twice");
      parents[static_cast<std::size_t>(i)].push_back(it->second);
    }
  }
  std::vector<int> indeg(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) indeg[static_cast<std::size_t>(i)] =
      static_cast<int>(parents[static_cast<std::size_t>(i)].size());
  std::vector<int> order;
  std::vector<bool> done(static_cast<std::size_t>(n), false);
  while (static_cast<int>(order.size()) < n) {
    int next = -1;
    for (int i = 0; i < n && next < 0; ++i)
      if (!done[static_cast<std::size_t>(i)] && indeg[static_cast<std::size_t>(i)] == 0) next = i;
    if (next < 0) break;
    done[static_cast<std::size_t>(next)] = true;
    order.push_back(next);
    for (int i = 0; i < n; ++i)
      for (int p : parents[static_cast<std::size_t>(i)])
        if (p == next) --indeg[static_cast<std::size_t>(i)];
  }
  if (static_cast<int>(order.size()) == n) return order;

  // Walk parent links among the remaining nodes until one repeats.
  int start = 0;
  while (done[static_cast<std::size_t>(start)]) ++start;
  std::vector<int> path;
  std::vector<int> seen_at(static_cast<std::size_t>(n), -1);
  int cur = start;
  while (seen_at[static_cast<std::size_t>(cur)] < 0) {
    seen_at[static_cast<std::size_t>(cur)] = static_cast<int>(path.size());
    path.push_back(cur);
    for (int p : parents[static_cast<std::size_t>(cur)])
      if (!done[static_cast<std::size_t>(p)]) {
        cur = p;
        break;
      }
  }
  // Parent links run against the edges, so read the path backwards.
  std::string cycle = spec.nodes[static_cast<std::size_t>(cur)].name;
  for (std::size_t i = path.size(); i-- > static_cast<std::size_t>(seen_at[static_cast<std::size_t>(cur)]);)
    cycle += " -> " + spec.nodes[static_cast<std::size_t>(path[i])].name;
  throw GraphError("cycle detected: " + cycle);
}

class CausalGraph {
 public:
  struct Node {
    std::string name;
    std::unique_ptr<CausalUnit> unit;
    std::vector<int> parents;
    std::vector<int> children;
    bool confounder = false;
    bool confounded = false;  // has a confounder parent
  };

  explicit CausalGraph(GraphSpec spec, std::optional<std::uint64_t> init_seed = std::nullopt)
      : spec_(std::move(spec)) {
    order_ = validate_and_order(spec_);
    const int n = static_cast<int>(spec_.nodes.size());
    nodes_.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto& ns = spec_.nodes[static_cast<std::size_t>(i)];
      auto& node = nodes_[static_cast<std::size_t>(i)];
      node.name = ns.name;
      node.confounder = ns.kind == UnitKind::Confounder;
      for (const auto& p : ns.parents) node.parents.push_back(index_of(p));
    }
    for (int i = 0; i < n; ++i)
      for (int p : nodes_[static_cast<std::size_t>(i)].parents)
        nodes_[static_cast<std::size_t>(p)].children.push_back(i);
    for (int i = 0; i < n; ++i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      if (node.confounder) {
        if (!node.parents.empty())
          throw GraphError("confounder '" + node.name + "' cannot have parents");
        if (node.children.size() != 2)
          throw GraphError("confounder '" + node.name + "' must confound exactly two nodes, has " +
                           std::to_string(node.children.size()));
        for (int c : node.children)
          if (nodes_[static_cast<std::size_t>(c)].confounder)
            throw GraphError("confounder '" + node.name + "' feeds another confounder");
        confounders_.push_back(i);
      } else {
        observed_.push_back(i);
      }
      for (int p : node.parents)
        if (nodes_[static_cast<std::size_t>(p)].confounder) node.confounded = true;
    }
    if (observed_.empty()) throw GraphError("graph has no observable nodes");
    // Encoding widths depend on parents' kinds, so build units after the
    // first pass.
    for (int i = 0; i < n; ++i) {
      const auto& ns = spec_.nodes[static_cast<std::size_t>(i)];
      int width = 0;
      for (int p : nodes_[static_cast<std::size_t>(i)].parents)
        width += encoding_width(spec_.nodes[static_cast<std::size_t>(p)]);
      nodes_[static_cast<std::size_t>(i)].unit = make_unit(ns, width);
    }
    const std::uint64_t seed = init_seed.value_or(spec_.seed);
    for (int i = 0; i < n; ++i) {
      Rng rng = make_rng(seed, {0x1417ULL, static_cast<std::uint64_t>(i)});
      nodes_[static_cast<std::size_t>(i)].unit->init_params(params_, rng);
    }
  }

  CausalGraph(const CausalGraph&) = delete;
  CausalGraph& operator=(const CausalGraph&) = delete;
  CausalGraph(CausalGraph&&) = default;
  CausalGraph& operator=(CausalGraph&&) = default;

  [[nodiscard]] const GraphSpec& spec() const { return spec_; }
  ParamStore& params() { return params_; }
  [[nodiscard]] const ParamStore& params() const { return params_; }

  [[nodiscard]] int node_count() const { return static_cast<int>(nodes_.size()); }
  [[nodiscard]] const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  CausalUnit& unit(int i) { return *nodes_.at(static_cast<std::size_t>(i)).unit; }
  [[nodiscard]] const CausalUnit& unit(int i) const { return *nodes_.at(static_cast<std::size_t>(i)).unit; }
  CausalUnit& unit(const std::string& name) { return unit(index_of(name)); }
  [[nodiscard]] const std::vector<int>& order() const { return order_; }
  [[nodiscard]] const std::vector<int>& observed() const { return observed_; }
  [[nodiscard]] const std::vector<int>& confounders() const { return confounders_; }
  [[nodiscard]] bool has_confounders() const { return !confounders_.empty(); }

  [[nodiscard]] std::vector<std::string> order_names() const {
    std::vector<std::string> out;
    for (int i : order_) out.push_back(nodes_[static_cast<std::size_t>(i)].name);
    return out;
  }
  [[nodiscard]] std::vector<std::string> observed_names() const {
    std::vector<std::string> out;
    for (int i : observed_) out.push_back(nodes_[static_cast<std::size_t>(i)].name);
    return out;
  }
  [[nodiscard]] std::vector<std::string> node_names() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) out.push_back(n.name);
    return out;
  }

  [[nodiscard]] int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i)
      if (spec_.nodes[i].name == name) return static_cast<int>(i);
    throw GraphError("unknown node '" + name + "'");
  }
  // Position of a node within observed order.
  [[nodiscard]] int observed_position(const std::string& name) const {
    const int idx = index_of(name);
    for (std::size_t i = 0; i < observed_.size(); ++i)
      if (observed_[i] == idx) return static_cast<int>(i);
    throw GraphError("node '" + name + "' is not observable");
  }

  // Reorders a table's columns into observed order (matching by name).
  [[nodiscard]] Table align(const Table& data) const {
    Table out(observed_names(), data.rows);
    std::vector<int> src;
    for (int i : observed_) {
      const int c = data.index_of(nodes_[static_cast<std::size_t>(i)].name);
      if (c < 0)
        throw EvidenceError("data has no column for node '" + nodes_[static_cast<std::size_t>(i)].name + "'");
      src.push_back(c);
    }
    for (int r = 0; r < data.rows; ++r)
      for (std::size_t j = 0; j < src.size(); ++j) out.at(r, static_cast<int>(j)) = data.at(r, src[j]);
    return out;
  }

  // Whether `from` reaches `to` along directed edges (a node reaches itself).
  [[nodiscard]] bool reaches(int from, int to) const {
    if (from == to) return true;
    std::vector<int> stack{from};
    std::vector<bool> seen(nodes_.size(), false);
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      for (int c : nodes_[static_cast<std::size_t>(cur)].children) {
        if (c == to) return true;
        if (!seen[static_cast<std::size_t>(c)]) {
          seen[static_cast<std::size_t>(c)] = true;
          stack.push_back(c);
        }
      }
    }
    return false;
  }

  // ---- validation -------------------------------------------------------

  void check_value(int node_index, double x) const {
    const auto& u = unit(node_index);
    if (!std::isfinite(x))
      throw EvidenceError("node '" + u.name() + "': non-finite value");
    if (u.discrete()) {
      const int k = static_cast<int>(x);
      if (k != x || k < 0 || k >= u.classes())
        throw EvidenceError("node '" + u.name() + "': value " + std::to_string(x) +
                            " outside support [0, " + std::to_string(u.classes()) + ")");
    }
  }

  void check_rows(const Table& rows) const {
    if (rows.cols() != static_cast<int>(observed_.size()))
      throw EvidenceError("rows have " + std::to_string(rows.cols()) + " columns, graph observes " +
                          std::to_string(observed_.size()));
    for (int r = 0; r < rows.rows; ++r)
      for (std::size_t j = 0; j < observed_.size(); ++j)
        check_value(observed_[j], rows.at(r, static_cast<int>(j)));
  }

  void check_intervention(const Intervention& iv) const {
    for (const auto& [name, value] : iv) {
      const int i = index_of(name);
      if (nodes_[static_cast<std::size_t>(i)].confounder)
        throw GraphError("cannot intervene on confounder '" + name + "'");
      check_value(i, value);
    }
  }

  // ---- sampling ---------------------------------------------------------

  // Ancestral sampling. Intervened nodes are fixed; confounders are sampled
  // and passed to their children but not returned. If `full_out` is given it
  // receives the full table including confounders, and `noise_out` the noise
  // used per node (rows x noise_dim).
  Table sample(int n, std::uint64_t seed, const Intervention& iv = {},
               Table* full_out = nullptr,
               std::vector<std::vector<double>>* noise_out = nullptr) const {
    check_intervention(iv);
    std::vector<std::vector<double>> noise(nodes_.size());
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      const auto& u = *nodes_[k].unit;
      const int d = u.noise_dim();
      noise[k].resize(static_cast<std::size_t>(n) * d);
      for (int r = 0; r < n; ++r) {
        Rng rng = make_rng(seed, {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(r)});
        u.draw_prior_noise(rng, std::span<double>(noise[k]).subspan(static_cast<std::size_t>(r) * d, d));
      }
    }
    Table full(node_names(), n);
    push_through(full, noise, iv);
    if (full_out) *full_out = full;
    if (noise_out) *noise_out = std::move(noise);
    return observed_part(full);
  }

  // Deterministic ancestral pass with given noise (node -> rows x noise_dim).
  void push_through(Table& full, const std::vector<std::vector<double>>& noise,
                    const Intervention& iv) const {
    std::vector<std::optional<double>> fixed(nodes_.size());
    for (const auto& [name, value] : iv) fixed[static_cast<std::size_t>(index_of(name))] = value;
    for (int k : order_) {
      const auto ku = static_cast<std::size_t>(k);
      if (fixed[ku]) {
        for (int r = 0; r < full.rows; ++r) full.at(r, k) = *fixed[ku];
        continue;
      }
      const auto& u = *nodes_[ku].unit;
      const int d = u.noise_dim();
      if (nodes_[ku].confounder) {
        for (int r = 0; r < full.rows; ++r) full.at(r, k) = noise[ku][static_cast<std::size_t>(r)];
        continue;
      }
      const std::vector<double> raw = raw_batch(k, full);
      const int rd = u.raw_dim();
      for (int r = 0; r < full.rows; ++r) {
        full.at(r, k) = u.sample(
            std::span<const double>(raw).subspan(static_cast<std::size_t>(r) * rd, rd),
            std::span<const double>(noise[ku]).subspan(static_cast<std::size_t>(r) * d, d));
      }
    }
  }

  // ---- log-likelihood ---------------------------------------------------

  // Confounder values for a batch: per confounder, rows*M draws laid out
  // row-major (row r uses entries r*M .. r*M+M-1).
  struct ConfounderDraws {
    int mc = 1;
    std::vector<std::vector<double>> values;
  };

  [[nodiscard]] ConfounderDraws draw_confounders(int rows, int mc, std::uint64_t seed) const {
    ConfounderDraws d;
    d.mc = mc;
    for (int c : confounders_) {
      std::vector<double> v(static_cast<std::size_t>(rows) * mc);
      for (int r = 0; r < rows; ++r) {
        Rng rng = make_rng(seed, {0xC0FFULL, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(r)});
        stratified_normals(rng, std::span<double>(v).subspan(static_cast<std::size_t>(r) * mc, mc));
      }
      d.values.push_back(std::move(v));
    }
    return d;
  }

  // Differentiable per-row log p(v) (B x 1). With confounders the marginal is
  // estimated as logsumexp_j log p(v | u_j) - log M.
  Var loglk(Tape& tape, const Table& rows, int mc, std::uint64_t seed) const {
    if (mc < 1) throw std::invalid_argument("Monte-Carlo sample count must be >= 1");
    return loglk_given(tape, rows, draw_confounders(rows.rows, has_confounders() ? mc : 1, seed));
  }

  Var loglk_given(Tape& tape, const Table& rows, const ConfounderDraws& draws) const {
    check_rows(rows);
    const int b = rows.rows;
    Table full = embed(rows);
    Var total{};
    auto accumulate = [&](Var& acc, Var term) { acc = acc.valid() ? tape.add(acc, term) : term; };
    for (int k : observed_)
      if (!nodes_[static_cast<std::size_t>(k)].confounded) accumulate(total, node_loglk(tape, k, full));
    if (has_confounders()) {
      const int m = draws.mc;
      Table expanded(node_names(), b * m);
      for (int r = 0; r < b; ++r)
        for (int j = 0; j < m; ++j) {
          auto src = full.row(r);
          std::copy(src.begin(), src.end(), expanded.row(r * m + j).begin());
        }
      for (std::size_t ci = 0; ci < confounders_.size(); ++ci)
        for (int q = 0; q < b * m; ++q)
          expanded.at(q, confounders_[ci]) = draws.values[ci][static_cast<std::size_t>(q)];
      Var conf{};
      for (int k : observed_)
        if (nodes_[static_cast<std::size_t>(k)].confounded) accumulate(conf, node_loglk(tape, k, expanded));
      Var lse = tape.add_const(tape.logsumexp_cols(tape.reshape(conf, {b, m})),
                               -std::log(static_cast<double>(m)));
      accumulate(total, lse);
    }
    return total;
  }

  // Non-differentiable per-row log p(v), evaluated in chunks.
  [[nodiscard]] std::vector<double> loglk_values(const Table& rows, int mc, std::uint64_t seed) const {
    const int m = has_confounders() ? mc : 1;
    const int chunk = std::max(1, 32768 / m);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(rows.rows));
    ConfounderDraws all = draw_confounders(rows.rows, m, seed);
    for (int start = 0; start < rows.rows; start += chunk) {
      const int len = std::min(chunk, rows.rows - start);
      std::vector<int> idx(static_cast<std::size_t>(len));
      std::iota(idx.begin(), idx.end(), start);
      ConfounderDraws part;
      part.mc = m;
      for (const auto& v : all.values)
        part.values.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(start) * m,
                                 v.begin() + static_cast<std::ptrdiff_t>(start + len) * m);
      Tape tape;
      Var lk = loglk_given(tape, rows.select_rows(idx), part);
      const auto& vals = tape.value(lk);
      out.insert(out.end(), vals.begin(), vals.end());
    }
    return out;
  }

  [[nodiscard]] double mean_nll(const Table& rows, int mc, std::uint64_t seed) const {
    const auto lk = loglk_values(rows, mc, seed);
    double acc = 0.0;
    for (double x : lk) acc -= x;
    return acc / static_cast<double>(lk.size());
  }

  // Sum over observable nodes of log p(v_k | pa_k) for each row of a full
  // table (confounder columns filled in).
  [[nodiscard]] std::vector<double> conditional_loglk(const Table& full) const {
    Tape tape;
    Var total{};
    for (int k : observed_) {
      Var term = node_loglk(tape, k, full);
      total = total.valid() ? tape.add(total, term) : term;
    }
    return tape.value(total);
  }

  // ---- abduction and counterfactuals ------------------------------------

  // Noise posterior of every observable node given a complete evidence row
  // (observed order) and confounder values (one per confounder).
  [[nodiscard]] std::vector<NoisePosterior> abduct_all(std::span<const double> evidence,
                                                       std::span<const double> confounder_values = {}) const {
    if (confounder_values.size() != confounders_.size())
      throw EvidenceError("abduction needs " + std::to_string(confounders_.size()) +
                          " confounder values");
    Table rows(observed_names(), 1);
    std::copy(evidence.begin(), evidence.end(), rows.row(0).begin());
    check_rows(rows);
    Table full = embed(rows);
    for (std::size_t c = 0; c < confounders_.size(); ++c)
      full.at(0, confounders_[c]) = confounder_values[c];
    std::vector<NoisePosterior> out(nodes_.size());
    for (int k : observed_) {
      const auto raw = raw_batch(k, full);
      out[static_cast<std::size_t>(k)] = unit(k).abduct(raw, full.at(0, k));
    }
    for (std::size_t c = 0; c < confounders_.size(); ++c)
      out[static_cast<std::size_t>(confounders_[c])] = NoisePosterior::exact(confounder_values[c]);
    return out;
  }

  // Abduction, intervention, prediction. Without confounders every row gets
  // weight 1/N. With confounders, u_1..u_M are stratified prior draws, weighted
  // by softmax_j log p(v | u_j), and the N rows are split across draws by
  // systematic resampling; each row carries weight w_j / count_j.
  [[nodiscard]] CounterfactualSet counterfactual(std::span<const double> evidence,
                                                 const Intervention& iv,
                                                 const InferenceConfig& cfg) const {
    if (cfg.cf_samples < 1 || cfg.mc_samples < 1)
      throw std::invalid_argument("counterfactual sample counts must be >= 1");
    check_intervention(iv);
    const int n = cfg.cf_samples;
    CounterfactualSet set;
    set.rows = Table(observed_names(), n);
    set.weights.assign(static_cast<std::size_t>(n), 1.0 / n);
    set.draw.assign(static_cast<std::size_t>(n), -1);

    std::vector<bool> intervened(nodes_.size(), false);
    for (const auto& [name, _] : iv) intervened[static_cast<std::size_t>(index_of(name))] = true;

    std::vector<std::vector<double>> noise(nodes_.size());
    for (std::size_t k = 0; k < nodes_.size(); ++k)
      noise[k].assign(static_cast<std::size_t>(n) * nodes_[k].unit->noise_dim(), 0.0);

    auto fill_noise = [&](int slot, const std::vector<NoisePosterior>& post) {
      for (int k : observed_) {
        const auto ku = static_cast<std::size_t>(k);
        if (intervened[ku]) continue;
        const int d = nodes_[ku].unit->noise_dim();
        Rng rng = make_rng(cfg.seed, {0xCFULL, ku, static_cast<std::uint64_t>(slot)});
        nodes_[ku].unit->draw_posterior_noise(
            post[ku], rng, std::span<double>(noise[ku]).subspan(static_cast<std::size_t>(slot) * d, d));
      }
    };

    if (!has_confounders()) {
      const auto post = abduct_all(evidence);
      for (int s = 0; s < n; ++s) fill_noise(s, post);
    } else {
      const int m = cfg.mc_samples;
      set.mc_samples = m;
      Table rows(observed_names(), 1);
      std::copy(evidence.begin(), evidence.end(), rows.row(0).begin());
      check_rows(rows);
      Table base = embed(rows);
      Table full(node_names(), m);
      for (int j = 0; j < m; ++j) {
        auto src = base.row(0);
        std::copy(src.begin(), src.end(), full.row(j).begin());
      }
      std::vector<std::vector<double>> u(confounders_.size(), std::vector<double>(static_cast<std::size_t>(m)));
      for (std::size_t c = 0; c < confounders_.size(); ++c) {
        Rng rng = make_rng(cfg.seed, {0xC0FFULL, static_cast<std::uint64_t>(confounders_[c])});
        stratified_normals(rng, u[c]);
        for (int j = 0; j < m; ++j) full.at(j, confounders_[c]) = u[c][static_cast<std::size_t>(j)];
      }
      const std::vector<double> logp = conditional_loglk(full);
      const double mx = *std::max_element(logp.begin(), logp.end());
      if (!std::isfinite(mx)) throw EvidenceError("evidence has zero likelihood under every confounder draw");
      std::vector<double> w(static_cast<std::size_t>(m));
      double z = 0.0;
      for (int j = 0; j < m; ++j) z += (w[static_cast<std::size_t>(j)] = std::exp(logp[static_cast<std::size_t>(j)] - mx));
      for (double& x : w) x /= z;
      set.draw_weights = w;

      // Systematic resampling of N slots over the M draws.
      Rng rs = make_rng(cfg.seed, {0x5E5ULL});
      const double offset = uniform01(rs);
      std::vector<int> counts(static_cast<std::size_t>(m), 0);
      {
        double cum = 0.0;
        int j = 0;
        for (int s = 0; s < n; ++s) {
          const double pos = (offset + s) / n;
          while (j < m - 1 && cum + w[static_cast<std::size_t>(j)] <= pos) cum += w[static_cast<std::size_t>(j++)];
          ++counts[static_cast<std::size_t>(j)];
          set.draw[static_cast<std::size_t>(s)] = j;
        }
      }
      std::vector<std::vector<double>> raws(nodes_.size());
      for (int k : observed_) raws[static_cast<std::size_t>(k)] = raw_batch(k, full);
      double wsum = 0.0;
      int slot = 0;
      for (int j = 0; j < m; ++j) {
        const int cnt = counts[static_cast<std::size_t>(j)];
        if (cnt == 0) continue;
        std::vector<NoisePosterior> post(nodes_.size());
        for (int k : observed_) {
          const auto ku = static_cast<std::size_t>(k);
          if (intervened[ku]) continue;
          const int rd = nodes_[ku].unit->raw_dim();
          post[ku] = nodes_[ku].unit->abduct(
              std::span<const double>(raws[ku]).subspan(static_cast<std::size_t>(j) * rd, rd),
              full.at(j, k));
        }
        for (int t = 0; t < cnt; ++t, ++slot) {
          fill_noise(slot, post);
          for (std::size_t c = 0; c < confounders_.size(); ++c)
            noise[static_cast<std::size_t>(confounders_[c])][static_cast<std::size_t>(slot)] =
                u[c][static_cast<std::size_t>(j)];
          set.weights[static_cast<std::size_t>(slot)] = w[static_cast<std::size_t>(j)] / cnt;
          wsum += w[static_cast<std::size_t>(j)] / cnt;
        }
      }
      for (double& x : set.weights) x /= wsum;
    }

    Table full(node_names(), n);
    push_through(full, noise, iv);
    set.rows = observed_part(full);
    return set;
  }

  // ---- helpers ----------------------------------------------------------

  // Network input for node k from the full table: continuous parents
  // normalized, Bernoulli parents as 0/1, categorical parents one-hot,
  // confounders raw.
  [[nodiscard]] std::vector<double> encode_inputs(int k, const Table& full) const {
    const auto& node = nodes_[static_cast<std::size_t>(k)];
    const int width = node.unit->input_dim();
    std::vector<double> in(static_cast<std::size_t>(full.rows) * width, 0.0);
    for (int r = 0; r < full.rows; ++r) {
      double* dst = in.data() + static_cast<std::size_t>(r) * width;
      int off = 0;
      for (int p : node.parents) {
        const auto& pu = *nodes_[static_cast<std::size_t>(p)].unit;
        const double x = full.at(r, p);
        if (pu.kind() == UnitKind::Categorical) {
          const int c = static_cast<int>(x);
          if (c < 0 || c >= pu.classes())
            throw EvidenceError("node '" + pu.name() + "': class out of range");
          dst[off + c] = 1.0;
          off += pu.classes();
        } else if (pu.has_normalizer()) {
          dst[off++] = pu.normalizer.normalize(x);
        } else {
          dst[off++] = x;
        }
      }
    }
    return in;
  }

  [[nodiscard]] std::vector<double> raw_batch(int k, const Table& full) const {
    const auto in = encode_inputs(k, full);
    return unit(k).eval_raw(params_, in, full.rows);
  }

  // Differentiable log p(v_k | pa_k) for each row of a full table.
  Var node_loglk(Tape& tape, int k, const Table& full) const {
    const auto& u = unit(k);
    Var in = tape.constant({full.rows, u.input_dim()}, encode_inputs(k, full));
    Var raw = u.raw_params(tape, params_, in);
    std::vector<double> vals(static_cast<std::size_t>(full.rows));
    for (int r = 0; r < full.rows; ++r) vals[static_cast<std::size_t>(r)] = full.at(r, k);
    return u.loglk(tape, raw, tape.column(vals));
  }

  [[nodiscard]] Table embed(const Table& rows) const {
    Table full(node_names(), rows.rows);
    for (int r = 0; r < rows.rows; ++r)
      for (std::size_t j = 0; j < observed_.size(); ++j)
        full.at(r, observed_[j]) = rows.at(r, static_cast<int>(j));
    return full;
  }

  [[nodiscard]] Table observed_part(const Table& full) const {
    Table out(observed_names(), full.rows);
    for (int r = 0; r < full.rows; ++r)
      for (std::size_t j = 0; j < observed_.size(); ++j)
        out.at(r, static_cast<int>(j)) = full.at(r, observed_[j]);
    return out;
  }

 private:
  static int encoding_width(const NodeSpec& parent) {
    return parent.kind == UnitKind::Categorical ? parent.hyper.classes : 1;
  }

  static std::unique_ptr<CausalUnit> make_unit(const NodeSpec& ns, int input_dim) {
    switch (ns.kind) {
      case UnitKind::Normal:
        return std::make_unique<NormalUnit>(ns.name, input_dim, ns.hyper.hidden, false);
      case UnitKind::GLM:
        return std::make_unique<NormalUnit>(ns.name, input_dim, std::vector<int>{}, true);
      case UnitKind::ALD:
        return std::make_unique<ALDUnit>(ns.name, input_dim, ns.hyper.hidden);
      case UnitKind::Bernoulli:
        return std::make_unique<BernoulliUnit>(ns.name, input_dim, ns.hyper.hidden);
      case UnitKind::Categorical:
        return std::make_unique<CategoricalUnit>(ns.name, input_dim, ns.hyper.hidden, ns.hyper.classes);
      case UnitKind::Flow:
        return std::make_unique<FlowUnit>(ns.name, input_dim, ns.hyper.hidden, ns.hyper.flow_layers,
                                          ns.hyper.flow_units, ns.hyper.init_jitter);
      case UnitKind::Confounder:
        return std::make_unique<ConfounderUnit>(ns.name);
    }
    throw GraphError("unsupported unit kind");
  }

  GraphSpec spec_;
  std::vector<Node> nodes_;
  std::vector<int> order_;
  std::vector<int> observed_;
  std::vector<int> confounders_;
  ParamStore params_;
};

// Density (continuous node) or PMF (discrete node) of `node` under an
// intervention, as the Monte-Carlo mixture mean_i p(x | pa_i) over n
// ancestral samples. Returns one value per grid point; for discrete nodes the
// grid is ignored and the K class probabilities are returned.
inline std::vector<double> interventional_density(const CausalGraph& g, const std::string& node,
                                                  const Intervention& iv, std::span<const double> grid, int n,
                                                  std::uint64_t seed) {
  const int k = g.index_of(node);
  if (g.node(k).confounder) throw GraphError("cannot evaluate the density of a confounder");
  if (iv.contains(node)) throw GraphError("density of an intervened node is degenerate");
  Table full;
  g.sample(n, seed, iv, &full);
  const auto& u = g.unit(k);
  std::vector<double> xs(grid.begin(), grid.end());
  if (u.discrete()) {
    xs.resize(static_cast<std::size_t>(u.classes()));
    std::iota(xs.begin(), xs.end(), 0.0);
  }
  const int m = static_cast<int>(xs.size());
  Table expanded(full.columns, n * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      auto src = full.row(i);
      std::copy(src.begin(), src.end(), expanded.row(i * m + j).begin());
      expanded.at(i * m + j, k) = xs[static_cast<std::size_t>(j)];
    }
  Tape tape;
  const auto lk = tape.value(g.node_loglk(tape, k, expanded));
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(j)] += std::exp(lk[static_cast<std::size_t>(i * m + j)]);
  for (double& x : out) x /= n;
  return out;
}

}  // namespace dcg
