#pragma once

// Utility (NDCG@K), risk (1 - NDCG@K), expected exposure and the squared
// exposure/relevance disparity, with Monte Carlo and exact estimators.
//
// Monte Carlo estimates use common random numbers: ranking j of a query is
// drawn from uniforms keyed by (query key, j, position) only, so the same
// uniforms are reused for every threshold. Per-query vectors in the results
// are aligned with the collection's query order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fairrank/dataset.hpp"
#include "fairrank/error.hpp"
#include "fairrank/plmodel.hpp"
#include "fairrank/random.hpp"
#include "json.hpp"

namespace fairrank {

enum class Estimator { monte_carlo, exact };

inline const char* to_string(Estimator e) { return e == Estimator::exact ? "exact" : "monte-carlo"; }

// rho_d in the disparity: the raw grade, or the exponential gain 2^rel - 1.
enum class RelevanceScale { grade, gain };

// Divide the pair sum by n(n-1), or report it raw.
enum class PairNormalization { ordered_pairs, none };

inline double relevance_gain(int rel) { return std::exp2(static_cast<double>(rel)) - 1.0; }

inline double rank_discount(std::size_t position) {
  return 1.0 / std::log2(static_cast<double>(position) + 2.0);
}

inline double ideal_dcg(const ScoredQuery& q, std::size_t k) {
  std::vector<int> rels;
  rels.reserve(q.size());
  for (const auto& d : q.docs) rels.push_back(d.relevance);
  std::sort(rels.begin(), rels.end(), std::greater<>());
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, rels.size()); ++i) dcg += relevance_gain(rels[i]) * rank_discount(i);
  return dcg;
}

inline double ndcg_at_k(const Ranking& ranking, const ScoredQuery& q, std::size_t k) {
  const double idcg = ideal_dcg(q, k);
  if (!(idcg > 0.0))
    throw DomainError("query '" + q.qid + "' has no relevant documents (IDCG = 0); filter it out first");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    dcg += relevance_gain(q.docs.at(ranking[i]).relevance) * rank_discount(i);
  return std::clamp(dcg / idcg, 0.0, 1.0);
}

// Per-query risk/exposure under one TPL configuration.
struct QueryEvaluation {
  double risk = 0.0;           // E[1 - NDCG@K]
  double risk_variance = 0.0;  // per-ranking loss variance (sample variance under MC)
  std::vector<double> exposure;
};

inline std::uint64_t query_stream_key(std::uint64_t seed, const std::string& qid) {
  return derive_key(seed, fnv1a64(qid));
}

namespace detail {

struct QueryLossModel {
  std::vector<double> gain;
  double idcg = 0.0;

  QueryLossModel(const ScoredQuery& q, std::size_t k) : idcg(ideal_dcg(q, k)) {
    if (!(idcg > 0.0))
      throw DomainError("query '" + q.qid + "' has no relevant documents (IDCG = 0); filter it out first");
    gain.reserve(q.size());
    for (const auto& d : q.docs) gain.push_back(relevance_gain(d.relevance));
  }

  double loss(const Ranking& r, std::size_t k) const {
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, r.size()); ++i) dcg += gain[r[i]] * rank_discount(i);
    return std::clamp(1.0 - dcg / idcg, 0.0, 1.0);
  }
};

// m x len matrix of uniforms; row j feeds ranking j.
inline std::vector<double> crn_uniforms(std::uint64_t query_key, std::size_t m, std::size_t len) {
  std::vector<double> u(m * len);
  for (std::size_t j = 0; j < m; ++j) {
    SplitMix64 gen(derive_key(query_key, j));
    for (std::size_t p = 0; p < len; ++p) u[j * len + p] = uniform01(gen);
  }
  return u;
}

inline QueryEvaluation evaluate_mc(const RcRow& row, const TplConfig& config,
                                   const QueryLossModel& model, std::span<const double> uniforms) {
  const std::size_t len = config.length(row.size());
  QueryEvaluation ev;
  ev.exposure.assign(row.size(), 0.0);
  if (*std::min_element(config.lambdas.begin(), config.lambdas.end()) >= row.max_rc()) {
    // Point mass on the canonical order: no sampling noise at all.
    const Ranking det = deterministic_ranking(row, len);
    ev.risk = model.loss(det, config.k);
    for (std::size_t p = 0; p < det.size(); ++p) ev.exposure[det[p]] = config.theta[p];
    return ev;
  }
  Ranking r;
  std::vector<char> used;
  std::vector<std::size_t> members;
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t j = 0; j < config.m; ++j) {
    sample_ranking_from_uniforms(row, config, uniforms.subspan(j * len, len), r, used, members);
    const double l = model.loss(r, config.k);
    sum += l;
    sumsq += l * l;
    for (std::size_t p = 0; p < r.size(); ++p) ev.exposure[r[p]] += config.theta[p];
  }
  const double m = static_cast<double>(config.m);
  ev.risk = sum / m;
  ev.risk_variance = config.m > 1 ? std::max(0.0, (sumsq - sum * sum / m) / (m - 1.0)) : 0.0;
  for (auto& e : ev.exposure) e /= m;
  return ev;
}

inline QueryEvaluation evaluate_exact(const RcRow& row, const TplConfig& config, const QueryLossModel& model) {
  QueryEvaluation ev;
  ev.exposure.assign(row.size(), 0.0);
  double mean = 0.0, second = 0.0;
  for (const auto& [r, p] : exact_ranking_distribution(row, config)) {
    const double l = model.loss(r, config.k);
    mean += p * l;
    second += p * l * l;
    for (std::size_t pos = 0; pos < r.size(); ++pos) ev.exposure[r[pos]] += p * config.theta[pos];
  }
  ev.risk = mean;
  ev.risk_variance = std::max(0.0, second - mean * mean);
  return ev;
}

}  // namespace detail

inline QueryEvaluation evaluate_query(const ScoredQuery& q, const RcRow& row, const TplConfig& config,
                                      Estimator estimator, std::uint64_t query_key) {
  const detail::QueryLossModel model(q, config.k);
  if (estimator == Estimator::exact) return detail::evaluate_exact(row, config, model);
  const auto u = detail::crn_uniforms(query_key, config.m, config.length(row.size()));
  return detail::evaluate_mc(row, config, model, u);
}

// Evaluates a query at every threshold of an ascending grid with a shared
// scalar lambda. Thresholds that admit the same upper sets of RC scores
// (same counts of s~ >= lambda and s~ > lambda) induce the same TPL
// distribution, so each such group is evaluated once.
inline std::vector<QueryEvaluation> evaluate_query_grid(const ScoredQuery& q, const RcRow& row,
                                                        const TplConfig& config, std::span<const double> grid,
                                                        Estimator estimator, std::uint64_t query_key) {
  const detail::QueryLossModel model(q, config.k);
  std::vector<double> desc = row.rc;
  std::sort(desc.begin(), desc.end(), std::greater<>());
  auto count_ge = [&](double l) {
    return static_cast<std::size_t>(std::upper_bound(desc.begin(), desc.end(), l, std::greater<>()) - desc.begin());
  };
  auto count_gt = [&](double l) {
    return static_cast<std::size_t>(std::upper_bound(desc.begin(), desc.end(), l, std::greater_equal<>()) - desc.begin());
  };
  std::vector<double> uniforms;
  if (estimator == Estimator::monte_carlo) uniforms = detail::crn_uniforms(query_key, config.m, config.length(row.size()));

  std::vector<QueryEvaluation> out;
  out.reserve(grid.size());
  std::pair<std::size_t, std::size_t> last_key{detail::npos, detail::npos};
  for (double lambda : grid) {
    const std::pair key{count_ge(lambda), count_gt(lambda)};
    if (!out.empty() && key == last_key) {
      out.push_back(out.back());
      continue;
    }
    const TplConfig c = config.with_lambda(lambda);
    out.push_back(estimator == Estimator::exact ? detail::evaluate_exact(row, c, model)
                                                : detail::evaluate_mc(row, c, model, uniforms));
    last_key = key;
  }
  return out;
}

struct UtilityResult {
  std::vector<double> per_query_ndcg;
  double mean_ndcg = 0.0;
  std::size_t k = 0;
};

struct RiskEstimate {
  std::vector<double> per_query_risk;
  double mean_risk = 0.0;
  double std_error = 0.0;  // of mean_risk; 0 for the exact estimator
  std::size_t m = 0;
  Estimator estimator = Estimator::monte_carlo;
};

struct DisparityResult {
  std::vector<double> per_query_disparity;
  double mean_disparity = 0.0;
  std::vector<double> per_query_raw;  // unnormalized pair sums
  double mean_disparity_raw = 0.0;
  PairNormalization normalization = PairNormalization::ordered_pairs;
};

inline bool all_enumerable(const QueryCollection& c) {
  return std::all_of(c.queries.begin(), c.queries.end(),
                     [](const ScoredQuery& q) { return q.size() <= kMaxEnumerationSize; });
}

inline Estimator choose_estimator(const QueryCollection& c) {
  return all_enumerable(c) ? Estimator::exact : Estimator::monte_carlo;
}

namespace detail {

inline RiskEstimate collect_risk(const std::vector<QueryEvaluation>& evals, std::size_t m, Estimator estimator) {
  RiskEstimate r;
  r.m = estimator == Estimator::exact ? 0 : m;
  r.estimator = estimator;
  double var_sum = 0.0;
  for (const auto& e : evals) {
    r.per_query_risk.push_back(e.risk);
    var_sum += e.risk_variance;
  }
  const double n = static_cast<double>(evals.size());
  if (!evals.empty()) {
    r.mean_risk = std::accumulate(r.per_query_risk.begin(), r.per_query_risk.end(), 0.0) / n;
    if (estimator == Estimator::monte_carlo) r.std_error = std::sqrt(var_sum / static_cast<double>(m)) / n;
  }
  return r;
}

}  // namespace detail

inline RiskEstimate mc_risk(const QueryCollection& c, const RcScoreTable& table, const TplConfig& config,
                            std::uint64_t seed) {
  config.validate();
  std::vector<QueryEvaluation> evals;
  evals.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    evals.push_back(evaluate_query(c.queries[i], table.rows[i], config, Estimator::monte_carlo,
                                   query_stream_key(seed, c.queries[i].qid)));
  return detail::collect_risk(evals, config.m, Estimator::monte_carlo);
}

inline RiskEstimate exact_risk(const QueryCollection& c, const RcScoreTable& table, const TplConfig& config) {
  config.validate();
  std::vector<QueryEvaluation> evals;
  evals.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    evals.push_back(evaluate_query(c.queries[i], table.rows[i], config, Estimator::exact, 0));
  return detail::collect_risk(evals, config.m, Estimator::exact);
}

// Expected exposure of every document of the query (0 for documents that can
// never reach the top K).
inline std::vector<double> expected_exposure(const ScoredQuery& q, const RcRow& row, const TplConfig& config,
                                             Estimator estimator, std::uint64_t query_key = 0) {
  config.validate();
  if (q.size() != row.size()) throw DomainError("RC row does not belong to query '" + q.qid + "'");
  const std::size_t len = config.length(row.size());
  std::vector<double> exposure(row.size(), 0.0);
  if (estimator == Estimator::exact) {
    for (const auto& [r, p] : exact_ranking_distribution(row, config))
      for (std::size_t pos = 0; pos < r.size(); ++pos) exposure[r[pos]] += p * config.theta[pos];
    return exposure;
  }
  const auto u = detail::crn_uniforms(query_key, config.m, len);
  Ranking r;
  std::vector<char> used;
  std::vector<std::size_t> members;
  for (std::size_t j = 0; j < config.m; ++j) {
    sample_ranking_from_uniforms(row, config, std::span<const double>(u).subspan(j * len, len), r, used, members);
    for (std::size_t pos = 0; pos < r.size(); ++pos) exposure[r[pos]] += config.theta[pos];
  }
  for (auto& e : exposure) e /= static_cast<double>(config.m);
  return exposure;
}

inline double relevance_weight(int rel, RelevanceScale scale) {
  return scale == RelevanceScale::gain ? relevance_gain(rel) : static_cast<double>(rel);
}

// Sum over ordered pairs d != d' of (E(d) rho_d' - E(d') rho_d)^2, divided
// by n(n-1) under PairNormalization::ordered_pairs. Single-document queries
// have no pairs and score 0.
inline double sq_disparity(const ScoredQuery& q, std::span<const double> exposure,
                           RelevanceScale scale = RelevanceScale::grade,
                           PairNormalization norm = PairNormalization::ordered_pairs) {
  if (exposure.size() != q.size()) throw DomainError("exposure vector does not match the query's documents");
  const std::size_t n = q.size();
  if (n < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    const double rho_a = relevance_weight(q.docs[a].relevance, scale);
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      const double diff = exposure[a] * relevance_weight(q.docs[b].relevance, scale) - exposure[b] * rho_a;
      sum += diff * diff;
    }
  }
  return norm == PairNormalization::ordered_pairs ? sum / static_cast<double>(n * (n - 1)) : sum;
}

inline DisparityResult aggregate_fairness(std::vector<double> per_query, std::vector<double> per_query_raw = {},
                                          PairNormalization norm = PairNormalization::ordered_pairs) {
  DisparityResult r;
  r.normalization = norm;
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  r.mean_disparity = mean(per_query);
  r.mean_disparity_raw = mean(per_query_raw);
  r.per_query_disparity = std::move(per_query);
  r.per_query_raw = std::move(per_query_raw);
  return r;
}

struct FairnessOptions {
  RelevanceScale scale = RelevanceScale::grade;
};

// Utility, risk and fairness of one TPL configuration over a collection.
struct CollectionMetrics {
  UtilityResult utility;
  RiskEstimate risk;
  DisparityResult fairness;
};

inline CollectionMetrics evaluate_collection(const QueryCollection& c, const RcScoreTable& table,
                                             const TplConfig& config, Estimator estimator, std::uint64_t seed,
                                             FairnessOptions fairness = {}) {
  config.validate();
  std::vector<QueryEvaluation> evals;
  std::vector<double> disparity, raw;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& q = c.queries[i];
    evals.push_back(evaluate_query(q, table.rows[i], config, estimator, query_stream_key(seed, q.qid)));
    disparity.push_back(sq_disparity(q, evals.back().exposure, fairness.scale, PairNormalization::ordered_pairs));
    raw.push_back(sq_disparity(q, evals.back().exposure, fairness.scale, PairNormalization::none));
  }
  CollectionMetrics out;
  out.risk = detail::collect_risk(evals, config.m, estimator);
  out.utility.k = config.k;
  for (double r : out.risk.per_query_risk) out.utility.per_query_ndcg.push_back(1.0 - r);
  out.utility.mean_ndcg = 1.0 - out.risk.mean_risk;
  out.fairness = aggregate_fairness(std::move(disparity), std::move(raw));
  return out;
}

// Metrics export. CSV columns: qid,ndcg,risk,disparity,disparity_raw
inline std::string metrics_csv(const QueryCollection& c, const CollectionMetrics& m) {
  std::string out = "qid,ndcg,risk,disparity,disparity_raw\n";
  for (std::size_t i = 0; i < c.size(); ++i) {
    out += c.queries[i].qid;
    for (double v : {m.utility.per_query_ndcg[i], m.risk.per_query_risk[i], m.fairness.per_query_disparity[i],
                     m.fairness.per_query_raw[i]}) {
      out += ',';
      out += nlohmann::json(v).dump();
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json metrics_summary_json(const CollectionMetrics& m) {
  return {{"k", m.utility.k},
          {"queries", m.risk.per_query_risk.size()},
          {"mean_ndcg", m.utility.mean_ndcg},
          {"mean_risk", m.risk.mean_risk},
          {"risk_std_error", m.risk.std_error},
          {"estimator", to_string(m.risk.estimator)},
          {"mc_samples", m.risk.m},
          {"mean_disparity", m.fairness.mean_disparity},
          {"mean_disparity_raw", m.fairness.mean_disparity_raw},
          {"disparity_normalization", "ordered_pairs"}};
}

}  // namespace fairrank
