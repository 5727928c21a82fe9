#include <gtest/gtest.h>

#include <cmath>

#include "fairrank/riskcontrol.hpp"
#include "oracles.hpp"

using namespace fairrank;

namespace {

RiskSpec spec_with(const std::vector<double>& grid, double alpha, double delta, Bound bound) {
  RiskSpec s;
  s.alpha = alpha;
  s.delta = delta;
  s.bound = bound;
  s.grid = grid;
  return s;
}

std::vector<double> uniform_grid(std::size_t points) {
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i) g.push_back(static_cast<double>(i) / static_cast<double>(points - 1));
  return g;
}

bool is_suffix(const CalibrationResult& r) {
  const std::size_t g = r.grid.size();
  const std::size_t c = r.certified.size();
  for (std::size_t i = 0; i < g; ++i)
    if (r.grid[i].certified != (i >= g - c)) return false;
  for (std::size_t i = 0; i < c; ++i)
    if (r.certified[i] != r.grid[g - c + i].lambda) return false;
  return true;
}

}  // namespace

TEST(H1, Examples) {
  for (double a : {0.01, 0.3, 0.77}) EXPECT_EQ(h1(a, a), 0.0);
  EXPECT_NEAR(h1(0.0, 0.5), std::log(2.0), 1e-15);
  const double want = static_cast<double>(oracle::h1(oracle::hp("0.1"), oracle::hp("0.3")));
  EXPECT_NEAR(h1(0.1, 0.3), want, 1e-15 * want);
  EXPECT_THROW(h1(0.4, 0.3), DomainError);
  EXPECT_THROW(h1(0.1, 1.0), DomainError);
  EXPECT_THROW(h1(-0.1, 0.3), DomainError);
}

TEST(BinomialTail, Examples) {
  EXPECT_EQ(binomial_tail(10, 0.3, 10), 1.0);
  EXPECT_NEAR(binomial_tail(10, 0.5, 0), std::ldexp(1.0, -10), 1e-18);
  const oracle::rational p(0.3);  // the exact binary value of the double 0.3
  const double want = static_cast<double>(oracle::binomial_cdf_exact(20, p, 5));
  EXPECT_NEAR(binomial_tail(20, 0.3, 5), want, 1e-13 * want);
  EXPECT_THROW(binomial_tail(0, 0.3, 0), DomainError);
  EXPECT_THROW(binomial_tail(10, 1.0, 3), DomainError);
  EXPECT_THROW(binomial_tail(10, 0.3, 11), DomainError);
}

TEST(BinomialTail, MatchesRationalOracleOnSmallCases) {
  SplitMix64 gen(1);
  for (int rep = 0; rep < 60; ++rep) {
    const unsigned n = 1 + static_cast<unsigned>(uniform_below(gen, 60));
    const unsigned j = static_cast<unsigned>(uniform_below(gen, n + 1));
    const double p = 0.01 + 0.98 * uniform01(gen);
    const double want = static_cast<double>(oracle::binomial_cdf_exact(n, oracle::rational(p), j));
    EXPECT_NEAR(binomial_tail(n, p, j), want, 1e-12 * want) << n << " " << p << " " << j;
  }
}

TEST(HbPValue, Examples) {
  EXPECT_GE(hb_p_value(0.3, 100, 0.2), 0.5);
  EXPECT_EQ(std::min(1.0, hb_p_value(0.25, 50, 0.2)), hb_p_value(0.25, 50, 0.2));
  EXPECT_NEAR(hb_p_value(0.0, 10, 0.5), std::ldexp(1.0, -10), 1e-18);
  EXPECT_NEAR(std::exp(1.0) * std::ldexp(1.0, -10), 2.655e-3, 1e-6);
  EXPECT_THROW(hb_p_value(1.2, 10, 0.5), DomainError);
  EXPECT_THROW(hb_p_value(0.1, 0, 0.5), DomainError);
  EXPECT_THROW(hb_p_value(0.1, 10, 1.0), DomainError);
}

TEST(HbPValue, NonIncreasingInAlphaAndInUnitInterval) {
  SplitMix64 gen(2);
  for (int rep = 0; rep < 200; ++rep) {
    const double r = uniform01(gen);
    const std::uint64_t n = 1 + uniform_below(gen, 3000);
    double prev = 2.0;
    for (int i = 1; i < 100; ++i) {
      const double p = hb_p_value(r, n, i / 100.0);
      EXPECT_GE(p, 0.0);  // underflows for large n
      EXPECT_LE(p, 1.0);
      EXPECT_LE(p, prev * (1 + 1e-12));
      prev = p;
    }
  }
}

TEST(Dkwm, Constant) {
  EXPECT_EQ(dkwm_constant(std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_EQ(dkwm_constant(std::vector<double>{0.0, 0.5, 1.0}), 1.0);
  EXPECT_EQ(dkwm_constant(std::vector<double>{0.3}), 0.0);
  EXPECT_THROW(dkwm_constant(std::vector<double>{}), DomainError);
  EXPECT_THROW(dkwm_constant(std::vector<double>{0.5, 0.1}), DomainError);
  EXPECT_THROW(dkwm_constant(std::vector<double>{0.1, 0.1}), DomainError);
}

TEST(Dkwm, Ucb) {
  EXPECT_EQ(dkwm_ucb(0.37, 50, 0.1, 0.0), 0.37);
  EXPECT_NEAR(dkwm_ucb(0.1, 200, 0.1, 1.0), 0.1 + std::sqrt(std::log(20.0) / 400.0), 1e-15);
  EXPECT_NEAR(dkwm_ucb(0.1, 200, 0.1, 1.0), 0.18654, 1e-5);
  for (std::uint64_t n = 1; n < 500; ++n) EXPECT_LT(dkwm_ucb(0.2, n + 1, 0.05, 1.0), dkwm_ucb(0.2, n, 0.05, 1.0));
  EXPECT_GT(dkwm_ucb(0.9, 5, 0.01, 1.0), 1.0);  // not clipped
  EXPECT_THROW(dkwm_ucb(0.1, 0, 0.1, 1.0), DomainError);
  EXPECT_THROW(dkwm_ucb(0.1, 10, 1.0, 1.0), DomainError);
  EXPECT_THROW(dkwm_ucb(0.1, 10, 0.1, -1.0), DomainError);
}

TEST(Envelope, Properties) {
  EXPECT_EQ(monotone_envelope(std::vector<double>{0.4}), std::vector<double>{0.4});
  const std::vector<double> dec{0.5, 0.4, 0.4, 0.1};
  EXPECT_EQ(monotone_envelope(dec), dec);
  SplitMix64 gen(3);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> r(1 + uniform_below(gen, 50));
    for (auto& x : r) x = uniform01(gen);
    const auto env = monotone_envelope(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_GE(env[i], r[i]);
      if (i) EXPECT_LE(env[i], env[i - 1]);
    }
  }
}

TEST(RiskCurve, SinglePointGrid) {
  SplitMix64 gen(4);
  QueryCollection c;
  for (int i = 0; i < 10; ++i) {
    auto q = oracle::random_query(gen, 3 + uniform_below(gen, 4));
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  auto spec = spec_with({0.0}, 0.3, 0.1, Bound::hb);
  const auto curve = build_risk_curve(c, table, TplConfig::make(5, 1.0, 0.0, 20), spec, 1);
  ASSERT_EQ(curve.r_hat.size(), 1u);
  EXPECT_EQ(curve.r_tilde[0], curve.r_hat[0]);
  EXPECT_EQ(curve.estimator, Estimator::exact);
  EXPECT_NEAR(curve.r_hat[0], exact_risk(c, table, TplConfig::make(5, 1.0, 0.0, 1)).mean_risk, 1e-15);
  spec.grid.clear();
  EXPECT_THROW(build_risk_curve(c, table, TplConfig::make(5, 1.0, 0.0, 20), spec, 1), ValidationError);
}

TEST(RiskCurve, McCurveUsesCommonRandomNumbers) {
  SplitMix64 gen(5);
  QueryCollection c;
  for (int i = 0; i < 40; ++i) {
    auto q = oracle::random_query(gen, 10 + uniform_below(gen, 6));
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  auto spec = spec_with(make_grid(GridMode::uniform, 21, table), 0.3, 0.1, Bound::hb);
  const auto cfg = TplConfig::make(5, 1.0, 0.0, 30);
  const auto curve = build_risk_curve(c, table, cfg, spec, 77);
  EXPECT_EQ(curve.estimator, Estimator::monte_carlo);
  for (std::size_t i = 0; i < spec.grid.size(); ++i)
    EXPECT_NEAR(curve.r_hat[i], mc_risk(c, table, cfg.with_lambda(spec.grid[i]), 77).mean_risk, 1e-14);
  EXPECT_EQ(curve.r_hat.back(), exact_risk(c, table, cfg.with_lambda(1.0)).mean_risk);
}

TEST(Select, Examples) {
  const auto grid = uniform_grid(11);
  const auto bad = make_risk_curve(grid, std::vector<double>(11, 0.5), 100);
  const auto abstain = select_threshold(bad, spec_with(grid, 0.2, 0.1, Bound::hb));
  EXPECT_TRUE(abstain.abstained());
  EXPECT_TRUE(abstain.certified.empty());
  EXPECT_TRUE(select_threshold(bad, spec_with(grid, 0.2, 0.1, Bound::dkwm)).abstained());

  const auto safe = make_risk_curve(grid, std::vector<double>(11, 0.0), 1000);
  for (Bound b : {Bound::hb, Bound::dkwm}) {
    const auto r = select_threshold(safe, spec_with(grid, 0.2, 0.1, b));
    ASSERT_FALSE(r.abstained());
    EXPECT_EQ(*r.lambda_hat, 0.0);
    EXPECT_EQ(r.certified, grid);
  }
  EXPECT_THROW(select_threshold(safe, spec_with(uniform_grid(5), 0.2, 0.1, Bound::hb)), DomainError);
}

TEST(Select, DkwmScanOracle) {
  const auto grid = uniform_grid(101);
  std::vector<double> r;
  for (double l : grid) r.push_back(std::max(0.0, 0.5 - l));
  const auto curve = make_risk_curve(grid, r, 2000);
  const double alpha = 0.2, width = std::sqrt(std::log(20.0) / 4000.0);
  std::optional<double> want;
  for (std::size_t i = grid.size(); i-- > 0;) {
    if (!(std::max(0.0, 0.5 - grid[i]) + width < alpha)) break;
    want = grid[i];
  }
  const auto got = select_threshold(curve, spec_with(grid, alpha, 0.1, Bound::dkwm));
  ASSERT_TRUE(want.has_value());
  EXPECT_EQ(got.lambda_hat, want);
  EXPECT_NEAR(*got.lambda_hat, 0.33, 1e-12);
}

TEST(Select, VacuousAlphaCertifiesEverything) {
  const auto grid = uniform_grid(11);
  const auto curve = make_risk_curve(grid, std::vector<double>(11, 0.99), 5);
  for (Bound b : {Bound::hb, Bound::dkwm}) {
    const auto r = select_threshold(curve, spec_with(grid, 1.0, 0.1, b));
    EXPECT_EQ(r.lambda_hat, 0.0);
  }
}

TEST(Select, SuffixAndMonotonicityProperties) {
  SplitMix64 gen(6);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t g = 2 + uniform_below(gen, 40);
    const auto grid = uniform_grid(g);
    std::vector<double> r(g);
    double level = 0.4 * uniform01(gen);
    for (std::size_t i = g; i-- > 0;) {
      r[i] = std::clamp(level + 0.03 * standard_normal(gen), 0.0, 1.0);
      level += 0.3 * uniform01(gen) / static_cast<double>(g);
    }
    const std::uint64_t n = 20 + uniform_below(gen, 2000);
    const double delta = 0.05 + 0.2 * uniform01(gen);
    for (Bound b : {Bound::hb, Bound::dkwm}) {
      std::size_t prev = 0;
      for (double alpha = 0.05; alpha < 0.95; alpha += 0.05) {
        const auto res = select_threshold(make_risk_curve(grid, r, n), spec_with(grid, alpha, delta, b));
        EXPECT_TRUE(is_suffix(res));
        EXPECT_GE(res.certified.size(), prev);
        prev = res.certified.size();
        if (!res.abstained()) EXPECT_EQ(*res.lambda_hat, res.certified.front());
        const auto more = select_threshold(make_risk_curve(grid, r, 2 * n), spec_with(grid, alpha, delta, b));
        EXPECT_GE(more.certified.size(), res.certified.size());
      }
    }
  }
}

TEST(Select, ConservativeOnBernoulliRisks) {
  // True risk mu(l) = 0.5 (1 - l), decreasing. Losses are coupled across
  // thresholds through one uniform per query, so each realized curve is
  // monotone like a real TPL risk curve.
  const auto grid = uniform_grid(51);
  const double alpha = 0.2, delta = 0.1;
  const std::size_t n = 300, trials = 500;
  SplitMix64 gen(7);
  for (Bound b : {Bound::hb, Bound::dkwm}) {
    std::size_t valid = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      std::vector<double> u(n);
      for (auto& x : u) x = uniform01(gen);
      std::vector<double> r;
      for (double l : grid) {
        const double mu = 0.5 * (1 - l);
        r.push_back(static_cast<double>(std::count_if(u.begin(), u.end(), [&](double x) { return x < mu; })) / n);
      }
      const auto res = select_threshold(make_risk_curve(grid, r, n), spec_with(grid, alpha, delta, b));
      bool ok = true;
      for (double l : res.certified) ok = ok && 0.5 * (1 - l) <= alpha + 1e-12;
      valid += ok;
    }
    EXPECT_GE(static_cast<double>(valid) / trials, 1 - delta) << to_string(b);
  }
}

TEST(Select, JsonShape) {
  const auto grid = uniform_grid(3);
  const auto r = select_threshold(make_risk_curve(grid, {0.3, 0.05, 0.0}, 500), spec_with(grid, 0.1, 0.1, Bound::hb));
  const auto j = to_json(r);
  EXPECT_EQ(j["outcome"], "selected");
  EXPECT_EQ(j["lambda_hat"], 0.5);
  EXPECT_EQ(j["bound"], "hb");
  ASSERT_EQ(j["grid"].size(), 3u);
  for (const char* key : {"lambda", "r_hat", "r_tilde", "p_or_ucb", "disparity", "certified"})
    EXPECT_TRUE(j["grid"][0].contains(key)) << key;
  const auto a = to_json(select_threshold(make_risk_curve(grid, {0.9, 0.9, 0.9}, 5), spec_with(grid, 0.1, 0.1, Bound::hb)));
  EXPECT_EQ(a["outcome"], "abstain");
  EXPECT_FALSE(a.contains("lambda_hat"));
}

TEST(Grid, UniformAndQuantile) {
  SplitMix64 gen(8);
  QueryCollection c;
  for (int i = 0; i < 30; ++i) {
    auto q = oracle::random_query(gen, 3 + uniform_below(gen, 10));
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  for (GridMode mode : {GridMode::uniform, GridMode::quantile}) {
    const auto g = make_grid(mode, 101, table);
    EXPECT_GE(g.front(), 0.0);
    EXPECT_LE(g.back(), table.p_max_global);
    for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GT(g[i], g[i - 1]);
    RiskSpec s = spec_with(g, 0.1, 0.1, Bound::hb);
    EXPECT_NO_THROW(s.validate());
  }
  const auto u = make_grid(GridMode::uniform, 101, table);
  EXPECT_EQ(u.size(), 101u);
  EXPECT_EQ(u.front(), 0.0);
  EXPECT_EQ(u.back(), table.p_max_global);
}

TEST(Spec, Validation) {
  EXPECT_THROW(spec_with({0.0}, 0.0, 0.1, Bound::hb).validate(), ValidationError);
  EXPECT_THROW(spec_with({0.0}, 0.1, 1.0, Bound::hb).validate(), ValidationError);
  EXPECT_THROW(spec_with({0.1, 0.1}, 0.1, 0.1, Bound::hb).validate(), ValidationError);
  EXPECT_THROW(spec_with({-0.1}, 0.1, 0.1, Bound::hb).validate(), ValidationError);
  EXPECT_NO_THROW(spec_with({0.0, 0.2}, 1.0, 0.1, Bound::hb).validate());
  EXPECT_EQ(abstention_fallback(), 1.0);
}
