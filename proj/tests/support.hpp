#pragma once

#include "dcg/dcg.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

namespace dcg::test {

// Largest relative error between analytic and central-difference gradients of
// f over every parameter scalar in the store.
inline double max_fd_rel_error(ParamStore& store, const std::function<double()>& f, const Gradients& analytic,
                               double h = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (auto& p : store) {
    const auto& g = analytic.at(p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = f();
      p.value[i] = orig - h;
      const double down = f();
      p.value[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline GraphSpec make_spec(std::vector<NodeSpec> nodes, std::uint64_t seed = 0) {
  GraphSpec s;
  s.nodes = std::move(nodes);
  s.seed = seed;
  return s;
}

inline NodeSpec node(std::string name, UnitKind kind, std::vector<std::string> parents = {},
                     std::vector<int> hidden = {32, 32}, int classes = 0) {
  NodeSpec n;
  n.name = std::move(name);
  n.kind = kind;
  n.parents = std::move(parents);
  n.hyper.hidden = kind == UnitKind::GLM ? std::vector<int>{} : std::move(hidden);
  n.hyper.classes = kind == UnitKind::Bernoulli ? 2 : classes;
  return n;
}

// Sets every parameter of the graph to N(0, scale^2) draws.
inline void randomize(ParamStore& store, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (auto& p : store)
    for (double& x : p.value) x = scale * std_normal(rng);
}

// Every unit kind, optionally with a latent confounder on x and b.
inline CausalGraph mixed_graph(bool confounded, std::uint64_t seed = 0) {
  const std::vector<int> h{5};
  std::vector<NodeSpec> nodes;
  if (confounded) nodes.push_back(node("u", UnitKind::Confounder));
  std::vector<std::string> xp, bp{"x"};
  if (confounded) {
    xp.push_back("u");
    bp.push_back("u");
  }
  nodes.push_back(node("x", UnitKind::Normal, xp, h));
  nodes.push_back(node("b", UnitKind::Bernoulli, bp, h));
  nodes.push_back(node("k", UnitKind::Categorical, {"b"}, h, 3));
  nodes.push_back(node("y", UnitKind::Flow, {"x", "k"}, h));
  nodes.push_back(node("z", UnitKind::ALD, {"y"}, h));
  nodes.push_back(node("g", UnitKind::GLM, {"z", "x"}));
  for (auto& n : nodes)
    if (n.kind == UnitKind::Flow) {
      n.hyper.flow_units = 4;
      n.hyper.init_jitter = 0.3;
    }
  return CausalGraph(make_spec(nodes, seed));
}

// Simpson's rule on [a, b] with n (even) intervals.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 2000) {
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace dcg::test
