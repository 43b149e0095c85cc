#include "oracles.hpp"
#include "support.hpp"

#include <cstdio>
#include <filesystem>

using namespace dcg;
using dcg::test::make_spec;
using dcg::test::node;

namespace {

// a ~ Bernoulli(1/2), x = 1.5 a + N(0,1), y = a + x + N(0,1).
CausalGraph protected_graph() {
  CausalGraph g(make_spec({node("a", UnitKind::Bernoulli, {}, {}), node("x", UnitKind::GLM, {"a"}),
                           node("y", UnitKind::GLM, {"a", "x"})}));
  auto& p = g.params();
  p.at("a/l0.b").value = {0.0};
  p.at("x/l0.W").value = {1.5, 0.0};
  p.at("x/l0.b").value = {0.0, 0.0};
  p.at("y/l0.W").value = {1.0, 1.0, 0.0, 0.0};
  p.at("y/l0.b").value = {0.0, 0.0};
  return g;
}

// A -> B -> C, A -> C, all linear-Gaussian with unit noise.
CausalGraph linear_chain() {
  CausalGraph g(make_spec({node("A", UnitKind::GLM), node("B", UnitKind::GLM, {"A"}),
                           node("C", UnitKind::GLM, {"A", "B"})}));
  auto& p = g.params();
  p.at("B/l0.W").value = {2.0, 0.0};
  p.at("B/l0.b").value = {0.0, 0.0};
  p.at("C/l0.W").value = {0.5, -1.5, 0.0, 0.0};
  p.at("C/l0.b").value = {0.0, 0.0};
  return g;
}

FunctionPredictor linear_predictor(std::vector<std::string> features, std::vector<double> w, double c = 0.0) {
  return FunctionPredictor(std::move(features), [w, c](std::span<const double> x) {
    double s = c;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    return s;
  });
}

double pearson_ref(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// O(n^2) average ranks: 1 + #smaller + (#equal - 1) / 2.
std::vector<double> ranks_ref(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      less += v < x[i];
      equal += v == x[i];
    }
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

}  // namespace

// ---- CU_k ---------------------------------------------------------------------

TEST(CuK, ZeroWhenNoFeatureDependsOnTheProtectedNode) {
  // z is a sibling of a, so flipping a leaves z untouched.
  CausalGraph g(make_spec({node("a", UnitKind::Bernoulli, {}, {}), node("z", UnitKind::GLM),
                           node("y", UnitKind::GLM, {"a", "z"})}));
  const Table rows = g.sample(50, 3);
  const auto pred = linear_predictor({"z"}, {2.0}, 1.0);
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 1, rows, {1, 10, 0}), 0.0, 1e-12);
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 2, rows, {1, 10, 0}), 0.0, 1e-12);
}

TEST(CuK, ConstantGapGivesThatGap) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(40, 4);
  // Reads only a: flipping it moves the prediction by exactly 0.75.
  const auto pred = linear_predictor({"a"}, {0.75});
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 1, rows, {1, 5, 1}), 0.75, 1e-12);
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 2, rows, {1, 5, 1}), 0.75 * 0.75, 1e-12);
  EXPECT_THROW(cu_k(g, pred, {"a", {}}, 0, rows, {1, 5, 1}), FairnessError);
}

TEST(CuK, LinearSemGapIsTheTotalEffect) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(30, 5);
  // Y = x - 0.5 a. Flipping a moves x by +-1.5 and Y by +-(1.5 - 0.5).
  const auto pred = linear_predictor({"a", "x"}, {-0.5, 1.0});
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 1, rows, {1, 7, 2}), 1.0, 1e-9);
}

TEST(CuK, DiscreteConfoundedGraphMatchesEnumeration) {
  const oracle::DiscreteCoefficients k;
  CausalGraph g = oracle::discrete_confounded_graph(k);
  const std::vector<double> w{0.5, 1.0, 1.0};  // on a, b, c
  Table rows(g.observed_names(), 0);
  double want = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        rows.append_row(std::vector<double>{double(a), double(b), double(c)});
        const auto e = oracle::discrete_counterfactual(k, a, b, c, 1 - a);
        const double y = w[0] * a + w[1] * b + w[2] * c;
        const double y_cf = w[0] * (1 - a) + w[1] * e.b + w[2] * e.c;
        want += std::abs(y_cf - y) / 8;
      }
  const auto pred = linear_predictor({"a", "b", "c"}, w);
  EXPECT_NEAR(cu_k(g, pred, {"a", {}}, 1, rows, {4000, 20000, 21}), want, 0.01);
}

TEST(CuK, InvariantToAConstantShift) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(60, 6);
  auto f = [](std::span<const double> x) { return std::tanh(x[1]) + 0.3 * x[0] * x[1]; };
  const FunctionPredictor base({"a", "x"}, f);
  const FunctionPredictor shifted({"a", "x"}, [f](std::span<const double> x) { return f(x) + 1234.5; });
  for (int deg : {1, 2, 3})
    EXPECT_NEAR(cu_k(g, base, {"a", {}}, deg, rows, {1, 20, 9}), cu_k(g, shifted, {"a", {}}, deg, rows, {1, 20, 9}),
                1e-9);
}

TEST(CuK, NonBinaryProtectedNodeNeedsExplicitValues) {
  CausalGraph g(make_spec({node("k", UnitKind::Categorical, {}, {}, 3), node("y", UnitKind::GLM, {"k"})}));
  const Table rows = g.sample(10, 1);
  const auto pred = linear_predictor({"y"}, {1.0});
  EXPECT_THROW(cu_k(g, pred, {"k", {}}, 1, rows, {1, 5, 0}), FairnessError);
  EXPECT_GE(cu_k(g, pred, {"k", {0, 1, 2}}, 1, rows, {1, 5, 0}), 0.0);
  EXPECT_THROW(cu_k(g, pred, {"y", {0.0}}, 1, rows, {1, 5, 0}), FairnessError);  // continuous
}

TEST(CuK, MultiValuedPolicyAveragesTheOtherLevels) {
  // The predictor reads k, so Y' is the mean of the two other levels.
  CausalGraph g(make_spec({node("k", UnitKind::Categorical, {}, {}, 3), node("y", UnitKind::GLM, {"k"})}));
  const Table rows = g.sample(30, 2);
  const auto pred = linear_predictor({"k"}, {1.0});
  const auto res = counterfactual_predictions(g, pred, {"k", {0, 1, 2}}, rows, {1, 4, 3});
  for (std::size_t i = 0; i < res.factual.size(); ++i) {
    const double k = res.factual[i];
    EXPECT_NEAR(res.counterfactual[i], (0 + 1 + 2 - k) / 2, 1e-12);
  }
}

// ---- black-box protocol ---------------------------------------------------------

TEST(BlackBox, InputsAndPredictionsReproduceInternalCu) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(25, 8);
  const auto pred = linear_predictor({"a", "x"}, {0.2, 0.9}, -1.0);
  const InferenceConfig cfg{1, 6, 13};
  const Table in = black_box_inputs(g, pred.features(), {"a", {}}, rows, cfg);
  EXPECT_EQ(in.columns, (std::vector<std::string>{"a", "x", "row_id", "cf_id", "weight"}));
  EXPECT_EQ(in.rows, 25 * 7);

  // Through CSV, as an external tool would see it.
  std::ostringstream in_csv;
  write_csv(in_csv, in);
  std::istringstream in_back(in_csv.str());
  const Table inputs = read_csv_table(in_back, "cf-inputs.csv");

  Table preds({"row_id", "cf_id", "prediction"}, 0);
  const auto y = pred.predict(inputs);  // extra columns are ignored
  for (int r = inputs.rows - 1; r >= 0; --r)  // order must not matter
    preds.append_row(std::vector<double>{inputs.at(r, 2), inputs.at(r, 3), y[static_cast<std::size_t>(r)]});
  const auto bb = cu_from_black_box(inputs, preds);
  const auto direct = counterfactual_predictions(g, pred, {"a", {}}, rows, cfg);
  ASSERT_EQ(bb.factual.size(), direct.factual.size());
  for (std::size_t i = 0; i < bb.factual.size(); ++i) {
    EXPECT_NEAR(bb.factual[i], direct.factual[i], 1e-12);
    EXPECT_NEAR(bb.counterfactual[i], direct.counterfactual[i], 1e-12);
  }

  Table missing = preds;
  missing.data.resize(missing.data.size() - 3);
  --missing.rows;
  EXPECT_THROW(cu_from_black_box(inputs, missing), FairnessError);
  Table dup = preds;
  dup.append_row(preds.row(0));
  EXPECT_THROW(cu_from_black_box(inputs, dup), FairnessError);
}

// ---- Spearman -------------------------------------------------------------------

TEST(Spearman, MonotoneAndReversed) {
  const std::vector<double> x{0.1, 3, 7, 8.5, 20};
  const std::vector<double> up{-4, 1, 1.5, 100, 101}, down{9, 8, 7, 6, 5};
  EXPECT_DOUBLE_EQ(spearman(x, up), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, down), -1.0);
}

TEST(Spearman, MatchesRankThenPearsonReference) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      // Rounded so that ties appear.
      a[static_cast<std::size_t>(i)] = std::round(3 * std_normal(rng));
      b[static_cast<std::size_t>(i)] = std_normal(rng);
    }
    const double want = pearson_ref(ranks_ref(a), ranks_ref(b));
    EXPECT_NEAR(spearman(a, b), want, 1e-12);
    EXPECT_GE(spearman(a, b), -1.0);
    EXPECT_LE(spearman(a, b), 1.0);
  }
}

TEST(Spearman, ByGroupAndSingletonError) {
  const std::vector<double> p{1, 2, 3, 4, 5, 6}, t{1, 2, 3, 6, 5, 4}, g{0, 0, 0, 1, 1, 1};
  const auto s = spearman_by_group(p, t, g);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s.at(0.0), 1.0);
  EXPECT_DOUBLE_EQ(s.at(1.0), -1.0);
  const std::vector<double> g2{0, 0, 0, 0, 0, 1};
  EXPECT_THROW(spearman_by_group(p, t, g2), FairnessError);
}

// ---- fair training ----------------------------------------------------------------

TEST(TrainFair, ZeroLambdaIsPlainMseTraining) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(200, 10);
  FairConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.learning_rate = 3e-3;
  cfg.seed = 4;
  MLPPredictor fair({"a", "x"}, "y", {8});
  // An invalid policy is never touched when lambda is zero.
  const auto curve = train_fair(g, fair, {"nope", {}}, 0.0, rows, cfg);
  ASSERT_EQ(curve.size(), 5u);

  // Reference: the same permutation and Adam steps on the MSE alone.
  MLPPredictor ref({"a", "x"}, "y", {8});
  ref.init(rows, cfg.seed);
  const auto x = ref.feature_matrix(rows);
  auto y = rows.column("y");
  for (double& v : y) v = ref.target_normalizer().normalize(v);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm =
        seeded_permutation(rows.rows, derive_seed(cfg.seed, {0xFA1ULL, static_cast<std::uint64_t>(epoch)}));
    for (int start = 0; start < rows.rows; start += cfg.batch_size) {
      const int len = std::min(cfg.batch_size, rows.rows - start);
      std::vector<double> bx, by;
      for (int i = 0; i < len; ++i) {
        const int r = perm[static_cast<std::size_t>(start + i)];
        bx.insert(bx.end(), x.begin() + 2 * r, x.begin() + 2 * r + 2);
        by.push_back(y[static_cast<std::size_t>(r)]);
      }
      Tape tape;
      Var loss = tape.mean(tape.square(tape.sub(ref.forward(tape, bx, len), tape.column(by))));
      auto grads = tape.backward(loss, ref.params());
      clip_grad_norm(grads, cfg.clip_norm);
      adam_step(ref.params(), grads, AdamConfig{cfg.learning_rate});
    }
  }
  EXPECT_EQ(fair.to_json().dump(), ref.to_json().dump());
}

TEST(TrainFair, NegativeLambdaIsRejected) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(20, 1);
  MLPPredictor p({"a", "x"}, "y", {4});
  EXPECT_THROW(train_fair(g, p, {"a", {}}, -0.1, rows, {}), FairnessError);
  EXPECT_THROW(MLPPredictor({"a", "y"}, "y"), FairnessError);
}

TEST(TrainFair, HugeLambdaLowersCu) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(300, 11);
  FairConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 64;
  cfg.learning_rate = 5e-3;
  cfg.mc_samples = 1;
  cfg.seed = 2;
  MLPPredictor plain({"a", "x"}, "y", {16}), fair({"a", "x"}, "y", {16});
  train_fair(g, plain, {"a", {}}, 0.0, rows, cfg);
  train_fair(g, fair, {"a", {}}, 1e6, rows, cfg);
  const InferenceConfig ic{1, 10, 5};
  const double cu_plain = cu_k(g, plain, {"a", {}}, 1, rows, ic);
  const double cu_fair = cu_k(g, fair, {"a", {}}, 1, rows, ic);
  EXPECT_GT(cu_plain, 1.0);  // the unconstrained fit follows a + x
  EXPECT_LT(cu_fair, 0.5 * cu_plain);
}

TEST(TrainFair, RegularizedCuIsLowerOverPairedSeeds) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(200, 12);
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FairConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 50;
    cfg.learning_rate = 5e-3;
    cfg.seed = seed;
    MLPPredictor plain({"a", "x"}, "y", {8}), fair({"a", "x"}, "y", {8});
    train_fair(g, plain, {"a", {}}, 0.0, rows, cfg);
    train_fair(g, fair, {"a", {}}, 1.0, rows, cfg);
    const InferenceConfig ic{1, 10, 100 + seed};
    wins += cu_k(g, fair, {"a", {}}, 1, rows, ic) <= cu_k(g, plain, {"a", {}}, 1, rows, ic);
  }
  EXPECT_GE(wins, 4);
}

TEST(TrainFair, ReportFields) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(100, 13);
  const auto pred = linear_predictor({"a", "x"}, {1.0, 1.0});
  const auto rep = fairness_report(g, pred, {"a", {}}, "y", rows, {1, 5, 0});
  EXPECT_EQ(rep.samples, 100);
  EXPECT_EQ(rep.policy, "complement");
  EXPECT_NEAR(rep.cu1, 2.5, 1e-9);
  EXPECT_NEAR(rep.cu2, 6.25, 1e-9);
  EXPECT_NEAR(rep.mse, 1.0, 0.35);  // the residual is the unit noise of y
  ASSERT_EQ(rep.spearman.size(), 2u);
  for (const auto& [grp, s] : rep.spearman) {
    EXPECT_GT(s, 0.5);
    EXPECT_LE(s, 1.0);
  }
  const auto j = to_json(rep);
  EXPECT_EQ(j["protected"], "a");
  EXPECT_TRUE(j["spearman"].contains("0"));
}

TEST(MLPPredictor, SaveLoadRoundtrip) {
  CausalGraph g = protected_graph();
  const Table rows = g.sample(80, 14);
  FairConfig cfg;
  cfg.epochs = 3;
  MLPPredictor p({"a", "x"}, "y", {6, 5});
  train_fair(g, p, {"a", {}}, 0.0, rows, cfg);
  const auto path = (std::filesystem::temp_directory_path() / "dcg_predictor_test.json").string();
  p.save(path);
  const MLPPredictor back = MLPPredictor::load(path);
  EXPECT_EQ(back.predict(rows), p.predict(rows));
  EXPECT_EQ(back.to_json().dump(), p.to_json().dump());
  std::remove(path.c_str());

  auto j = nlohmann::json::parse(p.to_json().dump());
  j["version"] = "dcg-predictor/9";
  EXPECT_THROW(MLPPredictor::from_json(j), CheckpointError);
  j = nlohmann::json::parse(p.to_json().dump());
  j["params"].erase("predictor/l0.W");
  EXPECT_THROW(MLPPredictor::from_json(j), CheckpointError);
}

// ---- explanations ---------------------------------------------------------------

TEST(ExplainSample, IdentityInterventionChangesNothing) {
  CausalGraph g = linear_chain();
  const Table ev = g.sample(10, 15);
  const auto pred = linear_predictor({"B", "C"}, {3.0, 1.0});
  for (int r = 0; r < ev.rows; ++r) {
    const auto e = explain_sample(g, pred, ev.row(r), {{"A", ev.at(r, 0)}}, {1, 4, 0});
    EXPECT_NEAR(e.counterfactual_prediction, e.factual_prediction, 1e-6);
  }
}

TEST(ExplainSample, UnreachableInterventionChangesNothing) {
  // C is a sink; the predictor reads A and B only.
  CausalGraph g = linear_chain();
  const Table ev = g.sample(5, 16);
  const auto pred = linear_predictor({"A", "B"}, {1.0, -2.0});
  for (int r = 0; r < ev.rows; ++r) {
    const auto e = explain_sample(g, pred, ev.row(r), {{"C", 42.0}}, {1, 4, 0});
    EXPECT_NEAR(e.counterfactual_prediction, e.factual_prediction, 1e-9);
  }
}

TEST(ExplainSample, LinearSemPathAlgebra) {
  CausalGraph g = linear_chain();
  const Table ev = g.sample(20, 17);
  const auto pred = linear_predictor({"B", "C"}, {3.0, 1.0}, 0.5);
  Rng rng(18);
  for (int r = 0; r < ev.rows; ++r) {
    const double a = ev.at(r, 0), b = ev.at(r, 1), c = ev.at(r, 2), a2 = a + 2 * std_normal(rng);
    const double b2 = b + 2 * (a2 - a);
    const double c2 = c + 0.5 * (a2 - a) - 1.5 * (b2 - b);
    const auto e = explain_sample(g, pred, ev.row(r), {{"A", a2}}, {1, 8, 0});
    EXPECT_NEAR(e.factual_prediction, 3 * b + c + 0.5, 1e-9);
    EXPECT_NEAR(e.counterfactual_prediction, 3 * b2 + c2 + 0.5, 1e-4);
    ASSERT_EQ(e.counterfactual_mean.size(), 3u);
    EXPECT_NEAR(e.counterfactual_mean[1], b2, 1e-4);
    EXPECT_NEAR(e.counterfactual_mean[2], c2, 1e-4);
  }
}

TEST(ExplainSample, AggregatesAgreeWithExpectationUnder) {
  const oracle::DiscreteCoefficients k;
  CausalGraph g = oracle::discrete_confounded_graph(k);
  const std::vector<double> ev{1, 0, 1};
  const InferenceConfig cfg{200, 500, 3};
  const auto pred = linear_predictor({"b", "c"}, {2.0, -1.0});
  const auto e = explain_sample(g, pred, ev, {{"a", 0.0}}, cfg);
  const auto set = g.counterfactual(ev, {{"a", 0.0}}, cfg);
  for (int c = 0; c < 3; ++c)
    EXPECT_EQ(e.counterfactual_mean[static_cast<std::size_t>(c)],
              expectation_under(set, [c](std::span<const double> row) { return row[static_cast<std::size_t>(c)]; }));
  EXPECT_NEAR(e.counterfactual_prediction,
              expectation_under(set, [](std::span<const double> row) { return 2 * row[1] - row[2]; }), 1e-12);
  EXPECT_EQ(e.factual, ev);
}
