#include <gtest/gtest.h>

#include <cmath>

#include "fairrank/metrics.hpp"
#include "fairrank/riskcontrol.hpp"
#include "oracles.hpp"

using namespace fairrank;

namespace {

QueryCollection single(const ScoredQuery& q) {
  QueryCollection c;
  c.queries.push_back(q);
  return c;
}

RcRow row_of(const ScoredQuery& q, double tau = 1.0) {
  return rc_scores(q, fit_normalization(single(q)), tau, DegeneratePolicy::uniform);
}

ScoredQuery graded(std::initializer_list<std::pair<double, int>> docs) {
  ScoredQuery q{"q", {}};
  int i = 0;
  for (auto [s, r] : docs) q.docs.push_back({"d" + std::to_string(i++), s, r});
  return q;
}

// Mean and variance of each document's exposure under the exact distribution.
std::pair<std::vector<double>, std::vector<double>> exposure_moments(const RcRow& row, const TplConfig& cfg) {
  std::vector<double> m1(row.size(), 0.0), m2(row.size(), 0.0);
  for (const auto& [r, p] : exact_ranking_distribution(row, cfg))
    for (std::size_t pos = 0; pos < r.size(); ++pos) {
      m1[r[pos]] += p * cfg.theta[pos];
      m2[r[pos]] += p * cfg.theta[pos] * cfg.theta[pos];
    }
  for (std::size_t i = 0; i < m1.size(); ++i) m2[i] = std::max(0.0, m2[i] - m1[i] * m1[i]);
  return {m1, m2};
}

}  // namespace

TEST(Ndcg, Examples) {
  const auto q = graded({{1, 0}, {2, 3}});
  EXPECT_DOUBLE_EQ(ndcg_at_k({1, 0}, q, 2), 1.0);
  EXPECT_NEAR(ndcg_at_k({0, 1}, q, 2), 1.0 / std::log2(3.0), 1e-15);
  const auto same = graded({{1, 2}, {2, 2}, {3, 2}});
  EXPECT_DOUBLE_EQ(ndcg_at_k({2, 0, 1}, same, 5), 1.0);
  EXPECT_THROW(ndcg_at_k({0}, graded({{1, 0}}), 1), DomainError);
}

TEST(Ndcg, RelevanceSortedIsOneAndBounded) {
  SplitMix64 gen(1);
  for (int rep = 0; rep < 200; ++rep) {
    auto q = oracle::random_query(gen, 1 + uniform_below(gen, 15));
    for (auto& d : q.docs) d.score = d.relevance;
    const std::size_t k = 1 + uniform_below(gen, 10);
    EXPECT_NEAR(ndcg_at_k(oracle::sorted_ranking(q, k), q, k), 1.0, 1e-12);
    Ranking r(q.size());
    std::iota(r.begin(), r.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(r), gen);
    const double v = ndcg_at_k(r, q, k);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Risk, EqualPairConvergesToHalf) {
  const auto q = graded({{1, 1}, {1, 0}});
  const auto c = single(q);
  const auto table = build_rc_table(c, fit_normalization(c), 1.0, DegeneratePolicy::uniform);
  const auto r = mc_risk(c, table, TplConfig::make(1, 1.0, 0.0, 20000), 99);
  EXPECT_NEAR(r.mean_risk, 0.5, 0.015);
  EXPECT_EQ(r.m, 20000u);
  EXPECT_EQ(r.estimator, Estimator::monte_carlo);
  const auto e = exact_risk(c, table, TplConfig::make(1, 1.0, 0.0, 1));
  EXPECT_DOUBLE_EQ(e.mean_risk, 0.5);
  EXPECT_EQ(e.estimator, Estimator::exact);
}

TEST(Risk, DeterministicThresholdHasNoNoise) {
  SplitMix64 gen(2);
  QueryCollection c;
  for (int i = 0; i < 30; ++i) {
    auto q = oracle::random_query(gen, 2 + uniform_below(gen, 15), 0.2);
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  const auto cfg = TplConfig::make(5, 1.0, abstention_fallback(), 500);
  const auto r = mc_risk(c, table, cfg, 5);
  EXPECT_EQ(r.std_error, 0.0);
  for (std::size_t i = 0; i < c.size(); ++i)
    EXPECT_DOUBLE_EQ(r.per_query_risk[i], 1.0 - ndcg_at_k(oracle::sorted_ranking(c.queries[i], 5), c.queries[i], 5));
}

TEST(Risk, McMatchesExactWithinThreeStandardErrors) {
  SplitMix64 gen(3);
  int within = 0;
  const int instances = 20;
  for (int rep = 0; rep < instances; ++rep) {
    QueryCollection c;
    for (int i = 0; i < 3; ++i) {
      auto q = oracle::random_query(gen, 2 + uniform_below(gen, 5));
      q.qid = "q" + std::to_string(i);
      c.queries.push_back(q);
    }
    const auto table = build_rc_table(c, fit_normalization(c), 1.0);
    const double lambda = uniform01(gen) * table.p_max_global;
    const auto cfg = TplConfig::make(3, 1.0, lambda, 20000);
    const auto exact = exact_risk(c, table, cfg);
    const auto mc = mc_risk(c, table, cfg, gen());
    within += std::abs(mc.mean_risk - exact.mean_risk) <= 3 * std::max(mc.std_error, 1e-12);
  }
  // A 3-SE band holds ~99.7% of the time; allow one miss.
  EXPECT_GE(within, instances - 1);
}

TEST(Risk, GridEvaluationMatchesPointwise) {
  SplitMix64 gen(4);
  for (int rep = 0; rep < 30; ++rep) {
    const auto q = oracle::random_query(gen, 3 + uniform_below(gen, 15), 0.2);
    const auto row = row_of(q);
    const auto cfg = TplConfig::make(5, 1.0, 0.0, 50);
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) grid.push_back(row.max_rc() * i / 20.0);
    grid.push_back(1.0);
    const auto key = query_stream_key(7, q.qid);
    const auto evals = evaluate_query_grid(q, row, cfg, grid, Estimator::monte_carlo, key);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto single_eval = evaluate_query(q, row, cfg.with_lambda(grid[i]), Estimator::monte_carlo, key);
      EXPECT_EQ(evals[i].risk, single_eval.risk);
      EXPECT_EQ(evals[i].exposure, single_eval.exposure);
    }
    if (q.size() <= kMaxEnumerationSize) {
      const auto ex = evaluate_query_grid(q, row, cfg, grid, Estimator::exact, 0);
      for (std::size_t i = 0; i < grid.size(); ++i)
        EXPECT_NEAR(ex[i].risk, evaluate_query(q, row, cfg.with_lambda(grid[i]), Estimator::exact, 0).risk, 1e-15);
    }
  }
}

TEST(Exposure, Examples) {
  const auto pair = graded({{1, 1}, {1, 1}});
  const auto row = row_of(pair);
  const auto e = expected_exposure(pair, row, TplConfig::make(2, 1.0, 0.0, 1), Estimator::exact);
  const double half = (1.0 + 1.0 / std::log2(3.0)) / 2.0;
  EXPECT_NEAR(e[0], half, 1e-15);
  EXPECT_NEAR(e[1], half, 1e-15);
  EXPECT_NEAR(half, 0.8155, 1e-4);

  const auto q = graded({{0.1, 1}, {3.0, 2}, {1.0, 0}, {-2.0, 0}});
  const auto drow = row_of(q);
  const auto cfg = TplConfig::make(3, 1.0, 1.0, 10);
  const auto d = expected_exposure(q, drow, cfg, Estimator::monte_carlo, 3);
  EXPECT_DOUBLE_EQ(d[1], cfg.theta[0]);
  EXPECT_DOUBLE_EQ(d[2], cfg.theta[1]);
  EXPECT_DOUBLE_EQ(d[0], cfg.theta[2]);
  EXPECT_EQ(d[3], 0.0);
  EXPECT_THROW(expected_exposure(graded({{1, 1}}), drow, cfg, Estimator::exact), DomainError);
}

TEST(Exposure, McMatchesExactWithinFourSigma) {
  SplitMix64 gen(5);
  for (int rep = 0; rep < 5; ++rep) {
    const auto q = oracle::random_query(gen, 5);
    const auto row = row_of(q);
    const auto cfg = TplConfig::make(3, 1.0, uniform01(gen) * row.max_rc(), 50000);
    const auto [mean, var] = exposure_moments(row, cfg);
    const auto mc = expected_exposure(q, row, cfg, Estimator::monte_carlo, gen());
    for (std::size_t i = 0; i < q.size(); ++i)
      EXPECT_NEAR(mc[i], mean[i], 4 * std::sqrt(var[i] / cfg.m) + 1e-12) << "doc " << i;
  }
}

TEST(Exposure, Conservation) {
  SplitMix64 gen(6);
  for (int rep = 0; rep < 100; ++rep) {
    const auto q = oracle::random_query(gen, 1 + uniform_below(gen, 8), 0.2);
    const auto row = row_of(q);
    const auto cfg = TplConfig::make(1 + uniform_below(gen, 8), 1.0, uniform01(gen) * 0.6, 1);
    const auto e = expected_exposure(q, row, cfg, Estimator::exact);
    double total = 0.0, expect = 0.0;
    for (double x : e) total += x;
    for (std::size_t i = 0; i < cfg.length(q.size()); ++i) expect += cfg.theta[i];
    EXPECT_NEAR(total, expect, 1e-9);
  }
}

TEST(Disparity, Examples) {
  const auto two = graded({{0, 1}, {0, 1}});
  EXPECT_DOUBLE_EQ(sq_disparity(two, std::vector<double>{1.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(sq_disparity(two, std::vector<double>{1.0, 0.0}, RelevanceScale::grade, PairNormalization::none),
                   2.0);
  const auto q = graded({{0, 1}, {0, 2}, {0, 0}, {0, 4}});
  EXPECT_NEAR(sq_disparity(q, std::vector<double>{0.5, 1.0, 0.0, 2.0}), 0.0, 1e-15);
  EXPECT_EQ(sq_disparity(graded({{0, 1}}), std::vector<double>{1.0}), 0.0);
  EXPECT_THROW(sq_disparity(q, std::vector<double>{1.0}), DomainError);
}

TEST(Disparity, HomogeneityAndNonNegativity) {
  SplitMix64 gen(7);
  for (int rep = 0; rep < 200; ++rep) {
    const auto q = oracle::random_query(gen, 2 + uniform_below(gen, 10));
    std::vector<double> e(q.size()), scaled(q.size()), prop(q.size());
    const double c = 0.1 + 5 * uniform01(gen);
    for (std::size_t i = 0; i < q.size(); ++i) {
      e[i] = uniform01(gen);
      scaled[i] = c * e[i];
      prop[i] = c * q.docs[i].relevance;
    }
    const double base = sq_disparity(q, e);
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(sq_disparity(q, scaled), c * c * base, 1e-12 * (1 + c * c * base));
    EXPECT_NEAR(sq_disparity(q, prop), 0.0, 1e-12);
    for (std::size_t i = 0; i < q.size(); ++i) prop[i] = c * relevance_gain(q.docs[i].relevance);
    EXPECT_NEAR(sq_disparity(q, prop, RelevanceScale::gain), 0.0, 1e-9);
  }
}

TEST(Disparity, Aggregate) {
  EXPECT_DOUBLE_EQ(aggregate_fairness({0.3}).mean_disparity, 0.3);
  EXPECT_DOUBLE_EQ(aggregate_fairness({0.0, 0.0, 0.0}).mean_disparity, 0.0);
  EXPECT_DOUBLE_EQ(aggregate_fairness({0.0, 1.0}).mean_disparity, 0.5);
  EXPECT_DOUBLE_EQ(aggregate_fairness({}).mean_disparity, 0.0);
}

TEST(Collection, EnvelopedExactRiskIsMonotone) {
  SplitMix64 gen(8);
  QueryCollection c;
  for (int i = 0; i < 20; ++i) {
    auto q = oracle::random_query(gen, 2 + uniform_below(gen, 6));
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  std::vector<double> risks;
  for (int i = 0; i <= 50; ++i)
    risks.push_back(exact_risk(c, table, TplConfig::make(5, 1.0, table.p_max_global * i / 50.0, 1)).mean_risk);
  const auto env = monotone_envelope(risks);
  for (std::size_t i = 1; i < env.size(); ++i) EXPECT_LE(env[i], env[i - 1]);
  for (std::size_t i = 0; i < env.size(); ++i) {
    EXPECT_GE(env[i], risks[i]);
    EXPECT_GE(risks[i], 0.0);
    EXPECT_LE(risks[i], 1.0);
  }
}

TEST(Collection, CsvAndSummary) {
  SplitMix64 gen(9);
  QueryCollection c;
  for (int i = 0; i < 4; ++i) {
    auto q = oracle::random_query(gen, 4);
    q.qid = "q" + std::to_string(i);
    c.queries.push_back(q);
  }
  const auto table = build_rc_table(c, fit_normalization(c), 1.0);
  const auto m = evaluate_collection(c, table, TplConfig::make(3, 1.0, 0.1, 10), Estimator::exact, 0);
  const auto csv = metrics_csv(c, m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "qid,ndcg,risk,disparity,disparity_raw");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  const auto j = metrics_summary_json(m);
  EXPECT_EQ(j["estimator"], "exact");
  EXPECT_NEAR(j["mean_ndcg"].get<double>() + j["mean_risk"].get<double>(), 1.0, 1e-15);
}
