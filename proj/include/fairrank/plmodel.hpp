#pragma once

// Score normalization, risk-control (RC) scores and the Thresholded
// Plackett-Luce (TPL) ranking model.
//
// For a query with normalized scores s_d, the RC score of d is the PL
// probability of drawing d first, s~_d = exp(s_d/tau) / sum_d' exp(s_d'/tau).
// At position k, TPL draws from the prediction set
//     T(lambda_k) = { d not yet ranked : s~_d >= lambda_k }
// with probability proportional to exp(s_d/tau). When that set is empty, or
// lambda_k is at least the largest remaining s~, the set collapses to the
// single best remaining document, so TPL is total on lambda in [0, inf):
// lambda = 0 gives PL and lambda >= 1 gives the deterministic ranking.
//
// "Canonical order" below is score descending with ties broken by doc id
// ascending. It is the deterministic ranking, and the order in which sampling
// scans candidates, so a fixed uniform maps to the same pick across nearby
// thresholds.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fairrank/dataset.hpp"
#include "fairrank/error.hpp"
#include "fairrank/random.hpp"
#include "json.hpp"

namespace fairrank {

struct NormalizationStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation

  bool degenerate() const noexcept { return !(std > 0.0); }
};

// What rc_scores does with degenerate (std = 0) statistics.
enum class DegeneratePolicy {
  reject,   // throw DomainError
  uniform,  // every normalized score is 0, so the softmax is uniform
};

// Pooled mean and population std of every raw score in the collection.
inline NormalizationStats fit_normalization(const QueryCollection& reference) {
  std::size_t count = 0;
  double sum = 0.0;
  for (const auto& q : reference.queries)
    for (const auto& d : q.docs) {
      sum += d.score;
      ++count;
    }
  if (count == 0) throw ValidationError("cannot fit normalization on an empty collection");
  NormalizationStats st;
  st.mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (const auto& q : reference.queries)
    for (const auto& d : q.docs) ss += (d.score - st.mean) * (d.score - st.mean);
  st.std = std::sqrt(ss / static_cast<double>(count));
  return st;
}

// Per-query model inputs, indexed like ScoredQuery::docs.
struct RcRow {
  double tau = 1.0;
  std::vector<double> normalized;  // s_d
  std::vector<double> rc;          // s~_d = p(d | empty prefix), sums to 1
  std::vector<double> weight;      // exp((s_d - max s) / tau), unnormalized PL weights
  std::vector<std::size_t> order;  // canonical order

  std::size_t size() const noexcept { return rc.size(); }
  double max_rc() const { return rc.empty() ? 0.0 : rc[order.front()]; }
};

inline std::vector<std::size_t> canonical_order(const ScoredQuery& q, std::span<const double> s) {
  std::vector<std::size_t> order(q.docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return q.docs[a].id < q.docs[b].id;
  });
  return order;
}

inline RcRow rc_scores(const ScoredQuery& q, const NormalizationStats& stats, double tau,
                       DegeneratePolicy policy = DegeneratePolicy::reject) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("temperature tau must be > 0");
  if (q.docs.empty()) throw ValidationError("query '" + q.qid + "' has no documents");
  const bool degenerate = stats.degenerate();
  if (degenerate && policy == DegeneratePolicy::reject)
    throw DomainError(
        "normalization std is 0 (constant scores); use DegeneratePolicy::uniform to fall back to "
        "a uniform softmax");
  RcRow row;
  row.tau = tau;
  const std::size_t n = q.docs.size();
  row.normalized.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    row.normalized[i] = degenerate ? 0.0 : (q.docs[i].score - stats.mean) / stats.std;
  const double top = *std::max_element(row.normalized.begin(), row.normalized.end());
  row.weight.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += row.weight[i] = std::exp((row.normalized[i] - top) / tau);
  row.rc.resize(n);
  for (std::size_t i = 0; i < n; ++i) row.rc[i] = row.weight[i] / total;
  row.order = canonical_order(q, row.normalized);
  return row;
}

struct RcScoreTable {
  NormalizationStats stats;
  double tau = 1.0;
  std::vector<RcRow> rows;   // aligned with the collection's queries
  double p_max_global = 0.0;  // largest s~ in this collection
};

inline RcScoreTable build_rc_table(const QueryCollection& c, const NormalizationStats& stats, double tau,
                                   DegeneratePolicy policy = DegeneratePolicy::reject) {
  RcScoreTable t;
  t.stats = stats;
  t.tau = tau;
  t.rows.reserve(c.size());
  for (const auto& q : c.queries) {
    t.rows.push_back(rc_scores(q, stats, tau, policy));
    t.p_max_global = std::max(t.p_max_global, t.rows.back().max_rc());
  }
  return t;
}

inline nlohmann::json to_json(const RcScoreTable& t, const QueryCollection& c) {
  nlohmann::json queries = nlohmann::json::array();
  for (std::size_t qi = 0; qi < c.size(); ++qi) {
    nlohmann::json docs = nlohmann::json::array();
    const auto& row = t.rows[qi];
    for (std::size_t i = 0; i < row.size(); ++i)
      docs.push_back({{"id", c.queries[qi].docs[i].id}, {"normalized", row.normalized[i]}, {"rc", row.rc[i]}});
    queries.push_back({{"qid", c.queries[qi].qid}, {"docs", std::move(docs)}});
  }
  return {{"mean", t.stats.mean},
          {"std", t.stats.std},
          {"tau", t.tau},
          {"p_max_global", t.p_max_global},
          {"queries", std::move(queries)}};
}

// Position weights 1/log2(k+1), matching the DCG discount.
inline std::vector<double> dcg_position_weights(std::size_t k) {
  std::vector<double> theta(k);
  for (std::size_t i = 0; i < k; ++i) theta[i] = 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return theta;
}

struct TplConfig {
  std::size_t k = 5;
  double tau = 1.0;
  std::vector<double> lambdas{0.0};  // one shared threshold, or one per position
  std::size_t m = 100;               // Monte Carlo rankings per query
  std::vector<double> theta = dcg_position_weights(5);

  static TplConfig make(std::size_t k, double tau, double lambda, std::size_t m) {
    TplConfig c;
    c.k = k;
    c.tau = tau;
    c.lambdas = {lambda};
    c.m = m;
    c.theta = dcg_position_weights(k);
    return c;
  }

  TplConfig with_lambda(double lambda) const {
    TplConfig c = *this;
    c.lambdas = {lambda};
    return c;
  }

  double lambda_at(std::size_t position) const {
    return lambdas.size() == 1 ? lambdas.front() : lambdas[position];
  }

  std::size_t length(std::size_t n) const noexcept { return std::min(k, n); }

  void validate() const {
    if (k < 1) throw ValidationError("cutoff K must be >= 1");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be > 0");
    if (m < 1) throw ValidationError("Monte Carlo sample count m must be >= 1");
    if (lambdas.size() != 1 && lambdas.size() != k)
      throw ValidationError("lambdas must hold 1 shared value or K = " + std::to_string(k) + " values");
    for (double l : lambdas)
      if (!(l >= 0.0) || std::isnan(l)) throw ValidationError("thresholds must be >= 0");
    if (theta.size() != k) throw ValidationError("theta must hold K position weights");
    for (std::size_t i = 0; i < k; ++i) {
      if (!(theta[i] > 0.0) || !std::isfinite(theta[i])) throw ValidationError("position weights must be > 0");
      if (i > 0 && theta[i] > theta[i - 1]) throw ValidationError("position weights must be non-increasing");
    }
  }
};

// Indices into the query's docs, best position first.
using Ranking = std::vector<std::size_t>;
using RankingDistribution = std::map<Ranking, double>;

inline std::vector<std::string> ranking_doc_ids(const ScoredQuery& q, const Ranking& r) {
  std::vector<std::string> ids;
  ids.reserve(r.size());
  for (auto i : r) ids.push_back(q.docs.at(i).id);
  return ids;
}

inline Ranking deterministic_ranking(const RcRow& row, std::size_t length) {
  return Ranking(row.order.begin(), row.order.begin() + static_cast<std::ptrdiff_t>(std::min(length, row.size())));
}

namespace detail {

inline constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

// Members of the prediction set for the next position, in canonical order.
// `used` flags already ranked documents. Returns the single best remaining
// document when the threshold admits nothing or reaches the remaining max.
inline void prediction_members(const RcRow& row, std::span<const char> used, double lambda,
                               std::vector<std::size_t>& out) {
  out.clear();
  std::size_t best = npos;
  for (auto i : row.order) {
    if (used[i]) continue;
    if (best == npos || row.rc[i] > row.rc[best]) best = i;
    if (row.rc[i] >= lambda) out.push_back(i);
  }
  if (best == npos) throw DomainError("prefix already ranks every document of the query");
  if (out.empty() || lambda >= row.rc[best]) out.assign(1, best);
}

// One TPL draw for the next position using uniform u in [0, 1).
inline std::size_t draw_next(const RcRow& row, std::span<const char> used, double lambda, double u,
                             std::vector<std::size_t>& members) {
  prediction_members(row, used, lambda, members);
  if (members.size() == 1) return members.front();
  double total = 0.0;
  for (auto i : members) total += row.weight[i];
  const double target = u * total;
  double cum = 0.0;
  for (auto i : members) {
    cum += row.weight[i];
    if (cum > target) return i;
  }
  return members.back();
}

}  // namespace detail

// The set T(lambda) for the position after `prefix`.
inline std::vector<std::size_t> prediction_set(const RcRow& row, std::span<const std::size_t> prefix, double lambda) {
  std::vector<char> used(row.size(), 0);
  for (auto i : prefix) {
    if (i >= row.size()) throw DomainError("prefix holds an index outside the query");
    used[i] = 1;
  }
  std::vector<std::size_t> out;
  detail::prediction_members(row, used, lambda, out);
  return out;
}

// Draws one ranking of length min(K, n), consuming exactly one uniform per
// position from `uniforms` (which must hold at least that many).
inline void sample_ranking_from_uniforms(const RcRow& row, const TplConfig& config, std::span<const double> uniforms,
                                         Ranking& out, std::vector<char>& used, std::vector<std::size_t>& members) {
  const std::size_t len = config.length(row.size());
  out.clear();
  used.assign(row.size(), 0);
  for (std::size_t pos = 0; pos < len; ++pos) {
    const std::size_t pick = detail::draw_next(row, used, config.lambda_at(pos), uniforms[pos], members);
    used[pick] = 1;
    out.push_back(pick);
  }
}

template <class Gen>
Ranking sample_ranking(const RcRow& row, const TplConfig& config, Gen& gen) {
  const std::size_t len = config.length(row.size());
  std::vector<double> u(len);
  for (auto& x : u) x = uniform01(gen);
  Ranking out;
  std::vector<char> used;
  std::vector<std::size_t> members;
  sample_ranking_from_uniforms(row, config, u, out, used, members);
  return out;
}

inline constexpr std::size_t kMaxEnumerationSize = 8;

namespace detail {

inline void enumerate_tpl(const RcRow& row, const TplConfig& config, std::size_t len, Ranking& prefix,
                          std::vector<char>& used, double prob, RankingDistribution& out) {
  if (prefix.size() == len) {
    out[prefix] += prob;
    return;
  }
  std::vector<std::size_t> members;
  prediction_members(row, used, config.lambda_at(prefix.size()), members);
  double total = 0.0;
  for (auto i : members) total += row.weight[i];
  for (auto i : members) {
    const double p = members.size() == 1 ? 1.0 : row.weight[i] / total;
    used[i] = 1;
    prefix.push_back(i);
    enumerate_tpl(row, config, len, prefix, used, prob * p, out);
    prefix.pop_back();
    used[i] = 0;
  }
}

}  // namespace detail

// Every ranking with non-zero TPL probability, with its probability.
inline RankingDistribution exact_ranking_distribution(const RcRow& row, const TplConfig& config) {
  // Above the top score every step is a singleton: no enumeration needed.
  if (*std::min_element(config.lambdas.begin(), config.lambdas.end()) >= row.max_rc())
    return {{deterministic_ranking(row, config.length(row.size())), 1.0}};
  if (row.size() > kMaxEnumerationSize)
    throw SizeGuardError("exact enumeration supports at most " + std::to_string(kMaxEnumerationSize) +
                         " documents per query, got " + std::to_string(row.size()));
  RankingDistribution out;
  Ranking prefix;
  std::vector<char> used(row.size(), 0);
  detail::enumerate_tpl(row, config, config.length(row.size()), prefix, used, 1.0, out);
  return out;
}

inline double total_variation(const RankingDistribution& a, const RankingDistribution& b) {
  double tv = 0.0;
  for (const auto& [r, p] : a) {
    auto it = b.find(r);
    tv += std::abs(p - (it == b.end() ? 0.0 : it->second));
  }
  for (const auto& [r, p] : b)
    if (!a.contains(r)) tv += std::abs(p);
  return 0.5 * tv;
}

// With one shared threshold, TPL should equal PL over A = {d : s~_d >= lambda}
// for the first min(K, |A|) positions followed by canonical-order completion.
// Builds that two-phase distribution directly and compares it with the
// enumerated TPL distribution.
inline bool shared_lambda_equivalence_check(const RcRow& row, double lambda, const TplConfig& config,
                                            double tolerance = 1e-9) {
  const std::size_t len = config.length(row.size());
  std::vector<std::size_t> admitted, rest;
  for (auto i : row.order) (row.rc[i] >= lambda ? admitted : rest).push_back(i);
  if (!admitted.empty() && lambda >= row.max_rc()) {
    // The whole query collapses to the deterministic ranking.
    rest = row.order;
    admitted.clear();
  }
  const std::size_t free_positions = std::min(len, admitted.size());

  RankingDistribution two_phase;
  Ranking prefix;
  std::vector<char> used(row.size(), 0);
  auto recurse = [&](auto&& self, double prob) -> void {
    if (prefix.size() == free_positions) {
      Ranking full = prefix;
      for (auto i : admitted)
        if (full.size() < len && !used[i]) full.push_back(i);
      for (auto i : rest)
        if (full.size() < len) full.push_back(i);
      two_phase[full] += prob;
      return;
    }
    double total = 0.0;
    for (auto i : admitted)
      if (!used[i]) total += row.weight[i];
    for (auto i : admitted) {
      if (used[i]) continue;
      used[i] = 1;
      prefix.push_back(i);
      self(self, prob * row.weight[i] / total);
      prefix.pop_back();
      used[i] = 0;
    }
  };
  recurse(recurse, 1.0);
  return total_variation(two_phase, exact_ranking_distribution(row, config.with_lambda(lambda))) <= tolerance;
}

}  // namespace fairrank
