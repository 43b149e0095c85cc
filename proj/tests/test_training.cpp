#include "support.hpp"

#include <numeric>
#include <set>

using namespace dcg;
using dcg::test::make_spec;
using dcg::test::node;

namespace {

Table normal_column(int n, double mu, double sigma, std::uint64_t seed, const std::string& name = "x") {
  Table t({name}, n);
  Rng rng(seed);
  for (double& v : t.data) v = mu + sigma * std_normal(rng);
  return t;
}

// A ~ N(0, 1), B | A ~ N(f(A), s^2)
Table conditional_gaussian(int n, std::uint64_t seed, double s, bool nonlinear) {
  Table t({"A", "B"}, n);
  Rng rng(seed);
  for (int r = 0; r < n; ++r) {
    const double a = std_normal(rng);
    t.at(r, 0) = a;
    t.at(r, 1) = (nonlinear ? std::sin(2 * a) + 0.5 * a : a) + s * std_normal(rng);
  }
  return t;
}

const double kHalfLog2PiE = 0.5 * std::log(2 * M_PI * M_E);

}  // namespace

// ---- warm start -----------------------------------------------------------

TEST(WarmStart, TwoPointColumn) {
  CausalGraph g(make_spec({node("x", UnitKind::Flow)}));
  Table t({"x"}, 2);
  t.data = {-1.0, 1.0};
  warm_start(g, t);
  EXPECT_DOUBLE_EQ(g.unit(0).normalizer.loc, 0.0);
  EXPECT_DOUBLE_EQ(g.unit(0).normalizer.scale, 1.0);
}

TEST(WarmStart, NormalizedColumnsHaveZeroMeanUnitStd) {
  CausalGraph g(make_spec({node("a", UnitKind::Normal), node("b", UnitKind::ALD, {"a"})}));
  Table t({"a", "b"}, 500);
  Rng rng(1);
  for (double& v : t.data) v = 40 + 7 * std_normal(rng) + uniform01(rng);
  warm_start(g, t);
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int r = 0; r < t.rows; ++r) m += g.unit(c).normalizer.normalize(t.at(r, c));
    m /= t.rows;
    for (int r = 0; r < t.rows; ++r) v += std::pow(g.unit(c).normalizer.normalize(t.at(r, c)) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(v / t.rows), 1.0, 1e-12);
  }
}

TEST(WarmStart, ConstantColumnNamesTheNode) {
  CausalGraph g(make_spec({node("flat", UnitKind::Normal)}));
  Table t({"flat"}, 3);
  t.data = {2, 2, 2};
  try {
    warm_start(g, t);
    FAIL();
  } catch (const DegenerateColumnError& e) {
    EXPECT_NE(std::string(e.what()).find("flat"), std::string::npos);
  }
}

TEST(WarmStart, IdentityFlowGivesGaussianEntropy) {
  auto n = node("x", UnitKind::Flow);
  n.hyper.init_jitter = 0.0;
  CausalGraph g(make_spec({n}));
  const Table t = normal_column(20000, 100, 25, 2);
  warm_start(g, t);
  EXPECT_NEAR(g.mean_nll(t, 1, 0), std::log(25.0) + 0.9189 + 0.5, 0.05);
}

// ---- fit ------------------------------------------------------------------

TEST(Fit, NormalRootRecoversSampleMoments) {
  CausalGraph g(make_spec({node("x", UnitKind::Normal)}));
  const Table t = normal_column(2000, 3, 2, 3);
  const auto xs = t.column(0);
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  const double s = std::sqrt(v / xs.size());
  warm_start(g, t);
  TrainConfig cfg;
  cfg.epochs = 200;
  fit(g, t, cfg);
  const auto raw = g.unit(0).eval_raw(g.params(), {}, 1);
  const auto& nz = g.unit(0).normalizer;
  EXPECT_NEAR(nz.denormalize(raw[0]), m, 0.05);
  EXPECT_NEAR(nz.scale * std::exp(raw[1]), s, 0.05);
  EXPECT_NEAR(m, 3.0, 0.15);
  EXPECT_NEAR(s, 2.0, 0.1);
}

TEST(Fit, ZeroEpochsLeavesParametersUntouched) {
  CausalGraph g(make_spec({node("A", UnitKind::Flow), node("B", UnitKind::Normal, {"A"})}));
  const Table t = conditional_gaussian(100, 4, 0.5, false);
  warm_start(g, t);
  const std::string before = dump_checkpoint(g, {});
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_TRUE(fit(g, t, cfg).empty());
  EXPECT_EQ(dump_checkpoint(g, {}), before);
}

TEST(Fit, LinearGaussianPairReachesJointEntropy) {
  CausalGraph g(make_spec({node("A", UnitKind::GLM), node("B", UnitKind::GLM, {"A"})}));
  const Table train = conditional_gaussian(4000, 5, 0.5, false);
  const Table test = conditional_gaussian(4000, 6, 0.5, false);
  warm_start(g, train);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.learning_rate = 1e-2;
  const auto curve = fit(g, train, cfg);
  EXPECT_LE(curve.back(), curve.front());
  const double entropy = kHalfLog2PiE + (kHalfLog2PiE + std::log(0.5));
  EXPECT_NEAR(g.mean_nll(test, 1, 0), entropy, 0.05);
}

TEST(Fit, SmoothedLossCurveIsNonIncreasing) {
  CausalGraph g(make_spec({node("A", UnitKind::Flow), node("B", UnitKind::Flow, {"A"})}));
  const Table t = conditional_gaussian(1000, 7, 0.3, true);
  warm_start(g, t);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 3e-3;
  const auto curve = fit(g, t, cfg);
  double prev = std::numeric_limits<double>::infinity();
  for (int w = 0; w + 10 <= 60; w += 10) {
    const double avg = std::accumulate(curve.begin() + w, curve.begin() + w + 10, 0.0) / 10;
    EXPECT_LE(avg, prev) << "window " << w;
    prev = avg;
  }
}

TEST(Fit, RunsAreDeterministic) {
  auto run = [] {
    CausalGraph g(make_spec({node("u", UnitKind::Confounder), node("A", UnitKind::Normal, {"u"}, {8}),
                             node("B", UnitKind::Flow, {"A", "u"}, {8})}));
    const Table t = conditional_gaussian(300, 8, 0.5, true);
    warm_start(g, t);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.mc_samples = 10;
    cfg.seed = 42;
    fit(g, t, cfg);
    return dump_checkpoint(g, cfg);
  };
  EXPECT_EQ(run(), run());
}

TEST(Fit, DivergenceReportsBatchAndLastGoodCheckpoint) {
  CausalGraph g(make_spec({node("x", UnitKind::Normal)}));
  Table t = normal_column(64, 0, 1, 9);
  warm_start(g, t);
  t.at(40, 0) = 1e300;  // squares to inf inside the loss
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  try {
    fit(g, t, cfg);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0);
    EXPECT_GE(e.batch(), 0);
    EXPECT_LT(e.batch(), 4);
    EXPECT_NO_THROW(parse_checkpoint(e.last_good_checkpoint()));
  }
}

TEST(Fit, InvalidConfigsAreRejected) {
  TrainConfig c;
  c.mc_samples = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Fit, FlowDoesNotLoseToNormalOnConditionalGaussianData) {
  const Table train = conditional_gaussian(3000, 10, 0.4, true);
  const Table test = conditional_gaussian(3000, 11, 0.4, true);
  auto held_out = [&](UnitKind kind) {
    CausalGraph g(make_spec({node("A", kind), node("B", kind, {"A"})}));
    warm_start(g, train);
    TrainConfig cfg;
    cfg.epochs = 80;
    cfg.learning_rate = 3e-3;
    fit(g, train, cfg);
    return g.mean_nll(test, 1, 0);
  };
  const double flow = held_out(UnitKind::Flow), normal = held_out(UnitKind::Normal);
  EXPECT_LE(flow, normal + 0.02) << "flow " << flow << " normal " << normal;
}

// ---- folds ----------------------------------------------------------------

TEST(Folds, PartitionRowsAndAreSeeded) {
  const auto a = fold_assignment(103, 10, 5), b = fold_assignment(103, 10, 5), c = fold_assignment(103, 10, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::vector<int> sizes(10, 0);
  for (int f : a) {
    ASSERT_GE(f, 0);
    ASSERT_LT(f, 10);
    ++sizes[static_cast<std::size_t>(f)];
  }
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), 0), 103);
  for (int s : sizes) EXPECT_TRUE(s == 10 || s == 11);
  EXPECT_THROW(fold_assignment(5, 10, 0), std::invalid_argument);
}

TEST(Folds, CrossValidateShrinksBatchAndReportsEveryFold) {
  const Table t = conditional_gaussian(60, 12, 0.5, false);
  TrainConfig cfg;
  cfg.epochs = 2;
  std::ostringstream log;
  const auto res = cross_validate(make_spec({node("A", UnitKind::GLM), node("B", UnitKind::GLM, {"A"})}), t, 10,
                                  cfg, &log);
  ASSERT_EQ(res.size(), 10u);
  int total = 0;
  for (const auto& r : res) {
    total += r.test_rows;
    EXPECT_EQ(r.train_rows + r.test_rows, 60);
    EXPECT_TRUE(std::isfinite(r.test_nll));
  }
  EXPECT_EQ(total, 60);
  EXPECT_NE(log.str().find("shrinking batch size"), std::string::npos);
}

// ---- checkpoints ----------------------------------------------------------

TEST(Checkpoint, SaveLoadSaveIsByteIdenticalAndLoglkBitExact) {
  auto s = make_spec({node("u", UnitKind::Confounder), node("g", UnitKind::Bernoulli, {"u"}, {4}),
                      node("k", UnitKind::Categorical, {"g"}, {4}, 3), node("a", UnitKind::ALD, {"u", "k"}, {4}),
                      node("f", UnitKind::Flow, {"a", "g"}, {4})},
                     77);
  CausalGraph g(s);
  dcg::test::randomize(g.params(), 5, 0.3);
  const Table rows = g.sample(100, 3);
  warm_start(g, rows);
  TrainConfig cfg;
  cfg.seed = 99;
  const std::string first = dump_checkpoint(g, cfg);
  auto loaded = parse_checkpoint(first);
  EXPECT_EQ(dump_checkpoint(loaded.graph, loaded.config), first);
  EXPECT_EQ(loaded.config.seed, 99u);
  EXPECT_EQ(g.loglk_values(rows, 20, 1), loaded.graph.loglk_values(rows, 20, 1));
}

TEST(Checkpoint, MalformedFilesAreErrorsNotCrashes) {
  CausalGraph g(make_spec({node("A", UnitKind::Flow), node("B", UnitKind::Normal, {"A"})}));
  const std::string text = dump_checkpoint(g, {});
  for (std::size_t cut : {std::size_t{0}, std::size_t{1}, text.size() / 3, text.size() / 2, text.size() - 3})
    EXPECT_THROW(parse_checkpoint(text.substr(0, cut)), CheckpointError) << cut;

  auto j = nlohmann::json::parse(text);
  j["version"] = "dcg-ckpt/0";
  EXPECT_THROW(parse_checkpoint(j.dump()), CheckpointError);

  j = nlohmann::json::parse(text);
  j["spec"]["nodes"][1]["parents"] = nlohmann::json::array();
  EXPECT_THROW(parse_checkpoint(j.dump()), CheckpointError);

  j = nlohmann::json::parse(text);
  j["params"].erase(j["params"].begin());
  EXPECT_THROW(parse_checkpoint(j.dump()), CheckpointError);

  j = nlohmann::json::parse(text);
  j["params"]["B/l0.b"]["values"].push_back(1.0);
  EXPECT_THROW(parse_checkpoint(j.dump()), CheckpointError);
}
