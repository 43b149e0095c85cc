#include "support.hpp"

#include <algorithm>

using namespace dcg;
using dcg::test::simpson;

namespace {

double a_hat_for(double a) { return std::log(std::expm1(a - kDsfMinA)); }

std::vector<double> random_stack(Rng& rng, int layers, int units, double scale = 1.0) {
  std::vector<double> raw(static_cast<std::size_t>(3 * layers * units));
  for (double& v : raw) v = scale * std_normal(rng);
  return raw;
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST(DsfForward, IdentityLayer) {
  const std::vector<double> raw{a_hat_for(1.0), 0.0, 0.0};
  const DSFParams p{raw, 1, 1};
  for (double x : {-3.0, -0.2, 0.0, 1.7}) {
    const auto e = dsf_forward(x, p);
    EXPECT_NEAR(e.eps, x, 1e-12);
    EXPECT_NEAR(e.logdet, 0.0, 1e-12);
  }
}

TEST(DsfForward, AffineLayer) {
  const std::vector<double> raw{a_hat_for(2.0), 0.0, 0.0};
  const DSFParams p{raw, 1, 1};
  for (double x : {-2.0, 0.5, 3.0}) {
    const auto e = dsf_forward(x, p);
    EXPECT_NEAR(e.eps, 2 * x, 1e-11);
    EXPECT_NEAR(e.logdet, std::log(2.0), 1e-11);
  }
  EXPECT_NEAR(dsf_inverse(2.0, p), 1.0, 1e-10);
}

TEST(DsfForward, IdentityRawComposesToIdentity) {
  const auto raw = dsf_identity_raw(3, 8);
  const DSFParams p{raw, 3, 8};
  for (double x : {-4.0, 0.3, 2.5}) {
    const auto e = dsf_forward(x, p);
    EXPECT_NEAR(e.eps, x, 1e-10);
    EXPECT_NEAR(e.logdet, 0.0, 1e-10);
    EXPECT_NEAR(dsf_inverse(x, p), x, 1e-10);
  }
}

TEST(DsfForward, LogdetMatchesFiniteDifferenceSlope) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto raw = random_stack(rng, 2, 4);
    const DSFParams p{raw, 2, 4};
    const double x = 1.5 * std_normal(rng), h = 1e-6;
    const double slope = (dsf_forward(x + h, p).eps - dsf_forward(x - h, p).eps) / (2 * h);
    const double logdet = dsf_forward(x, p).logdet;
    EXPECT_LT(std::abs(logdet - std::log(slope)) / std::max(1.0, std::abs(logdet)), 1e-4) << i;
  }
}

TEST(DsfForward, TapeAndScalarPathsAgree) {
  Rng rng(2);
  const int layers = 2, units = 5, rows = 6;
  std::vector<double> raw, xs;
  for (int r = 0; r < rows; ++r) {
    auto one = random_stack(rng, layers, units);
    raw.insert(raw.end(), one.begin(), one.end());
    xs.push_back(2 * std_normal(rng));
  }
  Tape t;
  auto [eps, logdet] = dsf_forward(t, t.constant({rows, 3 * layers * units}, raw), t.column(xs), layers, units);
  for (int r = 0; r < rows; ++r) {
    const DSFParams p{std::span<const double>(raw).subspan(static_cast<std::size_t>(r * 3 * layers * units),
                                                           static_cast<std::size_t>(3 * layers * units)),
                      layers, units};
    const auto e = dsf_forward(xs[static_cast<std::size_t>(r)], p);
    EXPECT_NEAR(t.at(eps, r, 0), e.eps, 1e-12);
    EXPECT_NEAR(t.at(logdet, r, 0), e.logdet, 1e-12);
  }
}

TEST(DsfInverse, RoundtripOverRandomStacks) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto raw = random_stack(rng, 2, 8);
    const DSFParams p{raw, 2, 8};
    const double x = 2 * std_normal(rng);
    const double eps = dsf_forward(x, p).eps;
    const double back = dsf_inverse(eps, p);
    EXPECT_NEAR(back, x, 1e-8) << i;
    EXPECT_LT(std::abs(dsf_forward(back, p).eps - eps), 1e-10 * std::max(1.0, std::abs(eps)));
  }
}

TEST(DsfInverse, TargetsOutsideTheClampedRangeThrow) {
  // logit of the clamped sum is bounded by about +-16.1.
  const std::vector<double> raw{a_hat_for(1.0), 0.0, 0.0};
  const DSFParams p{raw, 1, 1};
  EXPECT_THROW((void)dsf_inverse(40.0, p), InversionRangeError);
}

TEST(DsfProperties, ForwardIsStrictlyIncreasing) {
  Rng rng(4);
  for (int i = 0; i < 30; ++i) {
    const auto raw = random_stack(rng, 2, 6, 1.5);
    const DSFParams p{raw, 2, 6};
    double prev = -std::numeric_limits<double>::infinity();
    for (double x = -6.0; x <= 6.0; x += 0.05) {
      const double e = dsf_forward(x, p).eps;
      ASSERT_GT(e, prev) << "stack " << i << " x " << x;
      prev = e;
    }
  }
}

TEST(FlowUnitTest, IdentityInitialisationIsStandardNormalInZSpace) {
  FlowUnit u("x", 0, {32, 32}, 2, 8, 0.0);
  u.normalizer = {3.0, 2.0};
  ParamStore s;
  Rng rng(0);
  u.init_params(s, rng);
  const auto raw = u.eval_raw(s, {}, 1);
  for (double x : {-1.0, 3.0, 6.5})
    EXPECT_NEAR(u.log_density(raw, x), NormalUnit::log_density(x, 3.0, 2.0), 1e-10);
}

TEST(FlowUnitTest, ConditionalDensityIntegratesToOne) {
  FlowUnit u("y", 3, {16, 16}, 2, 8, 0.3);
  ParamStore s;
  Rng rng(5);
  u.init_params(s, rng);
  dcg::test::randomize(s, 55, 0.15);
  for (int i = 0; i < 10; ++i) {
    const std::vector<double> parents{std_normal(rng), std_normal(rng), std_normal(rng)};
    const auto raw = u.eval_raw(s, parents, 1);
    const double mass = simpson([&](double x) { return std::exp(u.log_density(raw, x)); }, -10, 10, 4000);
    EXPECT_NEAR(mass, 1.0, 1e-3) << i;
  }
}

// Any window [lo, hi] holds Phi(f(hi)) - Phi(f(lo)) of the mass, however
// extreme the parameters.
TEST(FlowUnitTest, WindowMassMatchesTransformedNormalCdf) {
  FlowUnit u("y", 2, {8}, 2, 8, 0.3);
  ParamStore s;
  Rng rng(9);
  u.init_params(s, rng);
  dcg::test::randomize(s, 99, 0.6);
  for (int i = 0; i < 10; ++i) {
    const std::vector<double> parents{std_normal(rng), std_normal(rng)};
    const auto raw = u.eval_raw(s, parents, 1);
    const double lo = -3, hi = 3;
    const double mass = simpson([&](double x) { return std::exp(u.log_density(raw, x)); }, lo, hi, 20000);
    const double oracle = std_normal_cdf(dsf_forward(hi, u.params(raw)).eps) -
                          std_normal_cdf(dsf_forward(lo, u.params(raw)).eps);
    EXPECT_NEAR(mass, oracle, 1e-4) << i;
  }
}

TEST(FlowUnitTest, SamplesFollowTheFlowCdf) {
  // Monotone flow: P(X <= x) = Phi(forward(x).eps).
  FlowUnit u("y", 0, {}, 2, 6, 0.0);
  ParamStore s;
  Rng rng(6);
  u.init_params(s, rng);
  dcg::test::randomize(s, 66, 0.3);
  const auto raw = u.eval_raw(s, {}, 1);
  std::vector<double> xs(100000);
  double e[1];
  for (double& x : xs) {
    u.draw_prior_noise(rng, e);
    x = u.sample(raw, e);
  }
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = std_normal_cdf(dsf_forward(xs[i], u.params(raw)).eps);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  EXPECT_LT(d, 0.02);
}

TEST(FlowUnitTest, AbductSampleDuality) {
  FlowUnit u("y", 2, {8}, 2, 8, 0.3);
  u.normalizer = {10.0, 4.0};
  ParamStore s;
  Rng rng(7);
  u.init_params(s, rng);
  dcg::test::randomize(s, 77, 0.2);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> parents{std_normal(rng), std_normal(rng)};
    const auto raw = u.eval_raw(s, parents, 1);
    const double e[1] = {std_normal(rng)};
    EXPECT_NEAR(u.abduct(raw, u.sample(raw, e)).value, e[0], 1e-7);
  }
}

TEST(FlowUnitTest, LearnsAConditionalNotAMarginal) {
  Rng rng(8);
  const int n = 2000;
  std::vector<double> x(n), y(n);
  for (int i = 0; i < n; ++i) {
    x[static_cast<std::size_t>(i)] = std_normal(rng);
    y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + 0.3 * std_normal(rng);
  }
  FlowUnit u("y", 1, {16}, 2, 4);
  u.normalizer = Normalizer::fit(y);
  ParamStore s;
  u.init_params(s, rng);
  for (int it = 0; it < 300; ++it) {
    Tape t;
    Var loss = t.neg(t.mean(u.loglk(t, u.raw_params(t, s, t.column(x)), t.column(y))));
    adam_step(s, t.backward(loss, s), AdamConfig{1e-2});
  }
  const std::vector<double> lo{-1.0}, hi{1.0};
  const double ll_lo = u.log_density(u.eval_raw(s, lo, 1), 1.0);
  const double ll_hi = u.log_density(u.eval_raw(s, hi, 1), 1.0);
  EXPECT_GT(ll_hi - ll_lo, 1.0);
}
