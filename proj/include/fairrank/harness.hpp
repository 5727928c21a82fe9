#pragma once

// Experiment harness: synthetic pre-scored data, repeated-split coverage
// runs and utility/fairness trade-off sweeps, plus JSON/CSV reports.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fairrank/dataset.hpp"
#include "fairrank/error.hpp"
#include "fairrank/metrics.hpp"
#include "fairrank/plmodel.hpp"
#include "fairrank/random.hpp"
#include "fairrank/riskcontrol.hpp"
#include "json.hpp"

namespace fairrank {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  std::size_t num_queries = 2000;
  std::size_t min_docs = 5;
  std::size_t max_docs = 20;
  std::array<double, 5> relevance_probs{0.45, 0.30, 0.15, 0.07, 0.03};  // grades 0..4
  double noise = 0.5;  // sigma of the gaussian score noise around g(rel) = rel
  double tie_cluster_prob = 0.5;
  std::size_t min_cluster = 2;
  std::size_t max_cluster = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_queries < 1) throw ValidationError("synthetic data needs at least one query");
    if (min_docs < 1 || max_docs < min_docs) throw ValidationError("need 1 <= min_docs <= max_docs");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ValidationError("noise sigma must be >= 0");
    if (!(tie_cluster_prob >= 0.0 && tie_cluster_prob <= 1.0))
      throw ValidationError("tie cluster probability must lie in [0, 1]");
    if (min_cluster < 2 || max_cluster < min_cluster) throw ValidationError("need 2 <= min_cluster <= max_cluster");
    double total = 0.0;
    for (double p : relevance_probs) {
      if (!(p >= 0.0)) throw ValidationError("relevance probabilities must be >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("relevance probabilities must sum to 1");
    if (relevance_probs[0] >= 1.0) throw ValidationError("some grade above 0 needs positive probability");
  }
};

namespace detail {

inline std::string padded(char prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*zu", prefix, width, i);
  return buf;
}

template <class Gen>
int draw_grade(Gen& gen, const std::array<double, 5>& probs) {
  double u = uniform01(gen);
  for (int g = 0; g < 4; ++g) {
    if (u < probs[g]) return g;
    u -= probs[g];
  }
  return 4;
}

}  // namespace detail

// Queries with score = rel + N(0, noise^2). Every query has a relevant
// document. With probability tie_cluster_prob a query gets a cluster of
// documents sharing the grade of a random relevant anchor, with scores within
// 0.01 * noise of the anchor's.
inline QueryCollection generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  QueryCollection out;
  out.provenance = "synthetic seed=" + std::to_string(spec.seed);
  const int qwidth = std::max(5, static_cast<int>(std::to_string(spec.num_queries).size()));
  for (std::size_t qi = 0; qi < spec.num_queries; ++qi) {
    SplitMix64 gen(derive_key(derive_key(spec.seed, 0x5e7d), qi));
    const std::size_t n = spec.min_docs + uniform_below(gen, spec.max_docs - spec.min_docs + 1);
    std::vector<int> rel(n);
    do {
      for (auto& r : rel) r = detail::draw_grade(gen, spec.relevance_probs);
    } while (*std::max_element(rel.begin(), rel.end()) == 0);
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) score[i] = rel[i] + spec.noise * standard_normal(gen);

    if (n >= 2 && uniform01(gen) < spec.tie_cluster_prob) {
      const std::size_t size =
          std::min(n, spec.min_cluster + uniform_below(gen, spec.max_cluster - spec.min_cluster + 1));
      std::vector<std::size_t> relevant;
      for (std::size_t i = 0; i < n; ++i)
        if (rel[i] > 0) relevant.push_back(i);
      const std::size_t anchor = relevant[uniform_below(gen, relevant.size())];
      std::vector<std::size_t> others;
      for (std::size_t i = 0; i < n; ++i)
        if (i != anchor) others.push_back(i);
      shuffle(std::span<std::size_t>(others), gen);
      for (std::size_t c = 0; c + 1 < size; ++c) {
        const std::size_t i = others[c];
        rel[i] = rel[anchor];
        score[i] = score[anchor] + 0.01 * spec.noise * (2.0 * uniform01(gen) - 1.0);
      }
    }
    ScoredQuery q;
    q.qid = detail::padded('q', qi, qwidth);
    for (std::size_t i = 0; i < n; ++i) q.docs.push_back(Document{detail::padded('d', i, 2), score[i], rel[i]});
    out.queries.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Coverage experiment

struct AlphaMode {
  enum class Kind { absolute, relative };
  Kind kind = Kind::absolute;
  double value = 0.1;  // alpha itself, or rho in alpha_t = 1 - rho * U*_t

  static AlphaMode absolute(double alpha) { return {Kind::absolute, alpha}; }
  static AlphaMode relative(double rho) { return {Kind::relative, rho}; }

  void validate() const {
    if (kind == Kind::absolute && !(value > 0.0 && value <= 1.0))
      throw ValidationError("absolute alpha must lie in (0, 1]");
    if (kind == Kind::relative && !(value > 0.0 && value < 1.0))
      throw ValidationError("relative utility level rho must lie in (0, 1)");
  }
};

struct CoverageOptions {
  std::size_t trials = 100;
  double calibration_fraction = 0.25;
  std::uint64_t seed = 0;
  std::size_t threads = 0;             // 0: hardware concurrency
  std::size_t test_mc_samples = 100;   // rankings per test query
  std::optional<NormalizationStats> reference;  // otherwise fit on each calibration split
  std::optional<Estimator> estimator;  // otherwise exact when every query has n <= 8
  FairnessOptions fairness;
};

struct TrialRecord {
  std::size_t trial = 0;
  bool abstained = false;
  std::optional<double> lambda_hat;
  double lambda_used = 0.0;  // lambda_hat, or the fallback when abstaining
  double alpha = 0.0;        // alpha_t actually targeted
  double u_star = 0.0;       // deterministic NDCG@K on the calibration split
  double test_ndcg = 0.0;
  double test_risk = 0.0;
  double test_disparity = 0.0;
  double det_ndcg = 0.0;
  double det_risk = 0.0;
  double det_disparity = 0.0;
  bool covered = false;  // test_risk <= alpha
  std::size_t cal_queries = 0;
  std::size_t test_queries = 0;

  friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

struct CoverageReport {
  std::size_t trials = 0;
  std::size_t covered = 0;      // covered among non-abstained trials
  std::size_t covered_all = 0;  // covered among all trials, fallback included
  std::size_t abstentions = 0;
  std::optional<double> coverage_rate;  // covered / (trials - abstentions); empty if all abstained
  double coverage_rate_all = 0.0;
  std::vector<TrialRecord> records;
  nlohmann::json settings;  // resolved run settings, echoed into reports
};

namespace detail {

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs body(i) for i in [0, count) on up to `threads` workers.
template <class Body>
void parallel_for(std::size_t count, std::size_t threads, Body&& body) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < count;) {
        try {
          body(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct DeterministicMetrics {
  double ndcg = 0.0;
  double disparity = 0.0;
};

inline DeterministicMetrics deterministic_metrics(const QueryCollection& c, const RcScoreTable& table,
                                                  const TplConfig& config, FairnessOptions fairness) {
  TplConfig det = config.with_lambda(abstention_fallback());
  det.m = 1;
  const auto m = evaluate_collection(c, table, det, Estimator::monte_carlo, 0, fairness);
  return {m.utility.mean_ndcg, m.fairness.mean_disparity};
}

}  // namespace detail

inline TrialRecord run_coverage_trial(const QueryCollection& collection, AlphaMode alpha_mode, const RiskSpec& spec,
                                      const TplConfig& config, const CoverageOptions& options, std::size_t t) {
  TrialRecord rec;
  rec.trial = t;
  auto [cal, test] = split(collection, SplitSpec{options.calibration_fraction, options.seed, t});
  rec.cal_queries = cal.size();
  rec.test_queries = test.size();

  const NormalizationStats stats = options.reference.value_or(fit_normalization(cal));
  const auto cal_table = build_rc_table(cal, stats, config.tau, DegeneratePolicy::uniform);
  const auto test_table = build_rc_table(test, stats, config.tau, DegeneratePolicy::uniform);

  const auto det_cal = detail::deterministic_metrics(cal, cal_table, config, options.fairness);
  rec.u_star = det_cal.ndcg;
  rec.alpha = alpha_mode.kind == AlphaMode::Kind::absolute ? alpha_mode.value : 1.0 - alpha_mode.value * rec.u_star;

  RiskSpec trial_spec = spec;
  trial_spec.grid = make_grid(spec.grid_mode, spec.grid_points, cal_table);
  trial_spec.alpha = rec.alpha;
  const std::uint64_t cal_seed = derive_key(derive_key(options.seed, 0xca1), t);
  const auto curve = build_risk_curve(cal, cal_table, config, trial_spec, cal_seed, options.estimator, options.fairness);
  rec.lambda_hat = select_threshold(curve, trial_spec).lambda_hat;
  rec.abstained = !rec.lambda_hat;
  rec.lambda_used = rec.lambda_hat.value_or(abstention_fallback());

  TplConfig test_config = config.with_lambda(rec.lambda_used);
  test_config.m = options.test_mc_samples;
  const std::uint64_t test_seed = derive_key(derive_key(options.seed, 0x7e57), t);
  const auto tm = evaluate_collection(test, test_table, test_config, options.estimator.value_or(choose_estimator(test)),
                                      test_seed, options.fairness);
  rec.test_ndcg = tm.utility.mean_ndcg;
  rec.test_risk = tm.risk.mean_risk;
  rec.test_disparity = tm.fairness.mean_disparity;
  const auto det_test = detail::deterministic_metrics(test, test_table, config, options.fairness);
  rec.det_ndcg = det_test.ndcg;
  rec.det_risk = 1.0 - det_test.ndcg;
  rec.det_disparity = det_test.disparity;
  rec.covered = rec.test_risk <= rec.alpha;
  return rec;
}

inline CoverageReport summarize_coverage(std::vector<TrialRecord> records) {
  CoverageReport r;
  r.trials = records.size();
  for (const auto& rec : records) {
    if (rec.abstained)
      ++r.abstentions;
    else if (rec.covered)
      ++r.covered;
    if (rec.covered) ++r.covered_all;
  }
  if (r.abstentions < r.trials)
    r.coverage_rate = static_cast<double>(r.covered) / static_cast<double>(r.trials - r.abstentions);
  r.coverage_rate_all = r.trials ? static_cast<double>(r.covered_all) / static_cast<double>(r.trials) : 0.0;
  r.records = std::move(records);
  return r;
}

// Repeats split -> calibrate -> test for trials 0..T-1. Each trial's
// randomness depends only on (options.seed, trial index).
inline CoverageReport run_coverage(const QueryCollection& collection, AlphaMode alpha_mode, const RiskSpec& spec,
                                   const TplConfig& config, const CoverageOptions& options) {
  alpha_mode.validate();
  config.validate();
  RiskSpec check = spec;
  check.alpha = 0.5;  // alpha is resolved per trial
  check.validate();
  if (options.trials < 1) throw ValidationError("coverage needs at least one trial");
  if (options.test_mc_samples < 1) throw ValidationError("test Monte Carlo sample count must be >= 1");
  SplitSpec{options.calibration_fraction, options.seed, 0}.validate();
  if (collection.size() < 2) throw ValidationError("coverage needs at least 2 queries");

  std::vector<TrialRecord> records(options.trials);
  detail::parallel_for(options.trials, detail::resolve_threads(options.threads), [&](std::size_t t) {
    records[t] = run_coverage_trial(collection, alpha_mode, spec, config, options, t);
  });
  CoverageReport report = summarize_coverage(std::move(records));
  report.settings = {{"alpha_mode", alpha_mode.kind == AlphaMode::Kind::absolute ? "absolute" : "relative"},
                     {"alpha_value", alpha_mode.value},
                     {"delta", spec.delta},
                     {"bound", to_string(spec.bound)},
                     {"grid_mode", to_string(spec.grid_mode)},
                     {"grid_points", spec.grid_points},
                     {"k", config.k},
                     {"tau", config.tau},
                     {"mc_samples", config.m},
                     {"test_mc_samples", options.test_mc_samples},
                     {"calibration_fraction", options.calibration_fraction},
                     {"seed", options.seed},
                     {"queries", collection.size()}};
  return report;
}

// ---------------------------------------------------------------------------
// Trade-off sweep

struct TradeoffRow {
  double lambda = 0.0;
  double mean_ndcg = 0.0;
  double mean_risk = 0.0;
  double mean_disparity = 0.0;
  double mean_disparity_raw = 0.0;

  friend bool operator==(const TradeoffRow&, const TradeoffRow&) = default;
};

struct TradeoffCurve {
  std::vector<TradeoffRow> rows;
  TradeoffRow pl_reference;   // PL model (lambda = 0), computed separately
  TradeoffRow det_reference;  // deterministic ranking, computed directly
  std::optional<bool> pl_endpoint_matches;   // set when the grid contains 0
  std::optional<bool> det_endpoint_matches;  // set when the last lambda reaches every RC score
  double p_max_global = 0.0;
  nlohmann::json settings;
};

// Deterministic metrics from the canonical order, without the sampler.
inline TradeoffRow direct_deterministic_row(const QueryCollection& c, const RcScoreTable& table,
                                            const TplConfig& config, FairnessOptions fairness = {}) {
  TradeoffRow row;
  row.lambda = abstention_fallback();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& q = c.queries[i];
    const Ranking r = deterministic_ranking(table.rows[i], config.length(q.size()));
    const double ndcg = ndcg_at_k(r, q, config.k);
    std::vector<double> exposure(q.size(), 0.0);
    for (std::size_t p = 0; p < r.size(); ++p) exposure[r[p]] = config.theta[p];
    row.mean_ndcg += ndcg;
    row.mean_risk += 1.0 - ndcg;
    row.mean_disparity += sq_disparity(q, exposure, fairness.scale, PairNormalization::ordered_pairs);
    row.mean_disparity_raw += sq_disparity(q, exposure, fairness.scale, PairNormalization::none);
  }
  const double n = static_cast<double>(c.size());
  row.mean_ndcg /= n;
  row.mean_risk /= n;
  row.mean_disparity /= n;
  row.mean_disparity_raw /= n;
  return row;
}

inline bool rows_match(const TradeoffRow& a, const TradeoffRow& b, double tol) {
  return std::abs(a.mean_ndcg - b.mean_ndcg) <= tol && std::abs(a.mean_risk - b.mean_risk) <= tol &&
         std::abs(a.mean_disparity - b.mean_disparity) <= tol &&
         std::abs(a.mean_disparity_raw - b.mean_disparity_raw) <= tol;
}

inline TradeoffCurve run_tradeoff_sweep(const QueryCollection& c, const TplConfig& config,
                                        const std::vector<double>& lambda_grid, std::uint64_t seed,
                                        std::optional<NormalizationStats> reference = std::nullopt,
                                        std::optional<Estimator> estimator = std::nullopt,
                                        FairnessOptions fairness = {}) {
  config.validate();
  if (lambda_grid.empty()) throw ValidationError("trade-off sweep needs a non-empty lambda grid");
  if (c.empty()) throw ValidationError("trade-off sweep needs queries");
  const auto stats = reference.value_or(fit_normalization(c));
  const auto table = build_rc_table(c, stats, config.tau, DegeneratePolicy::uniform);
  const Estimator est = estimator.value_or(choose_estimator(c));

  TradeoffCurve curve;
  curve.p_max_global = table.p_max_global;
  curve.rows.resize(lambda_grid.size());
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) curve.rows[i].lambda = lambda_grid[i];
  for (std::size_t qi = 0; qi < c.size(); ++qi) {
    const auto& q = c.queries[qi];
    const auto evals = evaluate_query_grid(q, table.rows[qi], config, lambda_grid, est, query_stream_key(seed, q.qid));
    for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
      curve.rows[i].mean_risk += evals[i].risk;
      curve.rows[i].mean_disparity += sq_disparity(q, evals[i].exposure, fairness.scale, PairNormalization::ordered_pairs);
      curve.rows[i].mean_disparity_raw += sq_disparity(q, evals[i].exposure, fairness.scale, PairNormalization::none);
    }
  }
  const double n = static_cast<double>(c.size());
  for (auto& row : curve.rows) {
    row.mean_risk /= n;
    row.mean_ndcg = 1.0 - row.mean_risk;
    row.mean_disparity /= n;
    row.mean_disparity_raw /= n;
  }

  const auto pl = evaluate_collection(c, table, config.with_lambda(0.0), est, seed, fairness);
  curve.pl_reference = {0.0, pl.utility.mean_ndcg, pl.risk.mean_risk, pl.fairness.mean_disparity,
                        pl.fairness.mean_disparity_raw};
  curve.det_reference = direct_deterministic_row(c, table, config, fairness);
  if (lambda_grid.front() == 0.0) curve.pl_endpoint_matches = rows_match(curve.rows.front(), curve.pl_reference, 1e-12);
  if (lambda_grid.back() >= table.p_max_global)
    curve.det_endpoint_matches = rows_match(curve.rows.back(), curve.det_reference, 1e-12);
  curve.settings = {{"k", config.k},       {"tau", config.tau},          {"mc_samples", config.m},
                    {"seed", seed},        {"estimator", to_string(est)}, {"queries", c.size()},
                    {"normalization_mean", stats.mean}, {"normalization_std", stats.std}};
  return curve;
}

// Spearman rank correlation with average ranks for ties; NaN if either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("spearman needs two equal-length series (n >= 2)");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { json, csv };

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline std::optional<double> opt_from(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

inline std::string num(double v) { return nlohmann::json(v).dump(); }

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

inline nlohmann::json to_json(const TrialRecord& r) {
  return {{"trial", r.trial},
          {"abstained", r.abstained},
          {"lambda_hat", detail::opt(r.lambda_hat)},
          {"lambda_used", r.lambda_used},
          {"alpha", r.alpha},
          {"u_star", r.u_star},
          {"test_ndcg", r.test_ndcg},
          {"test_risk", r.test_risk},
          {"test_disparity", r.test_disparity},
          {"det_ndcg", r.det_ndcg},
          {"det_risk", r.det_risk},
          {"det_disparity", r.det_disparity},
          {"covered", r.covered},
          {"cal_queries", r.cal_queries},
          {"test_queries", r.test_queries}};
}

inline TrialRecord trial_record_from_json(const nlohmann::json& j) {
  TrialRecord r;
  r.trial = j.at("trial").get<std::size_t>();
  r.abstained = j.at("abstained").get<bool>();
  r.lambda_hat = detail::opt_from(j.at("lambda_hat"));
  r.lambda_used = j.at("lambda_used").get<double>();
  r.alpha = j.at("alpha").get<double>();
  r.u_star = j.at("u_star").get<double>();
  r.test_ndcg = j.at("test_ndcg").get<double>();
  r.test_risk = j.at("test_risk").get<double>();
  r.test_disparity = j.at("test_disparity").get<double>();
  r.det_ndcg = j.at("det_ndcg").get<double>();
  r.det_risk = j.at("det_risk").get<double>();
  r.det_disparity = j.at("det_disparity").get<double>();
  r.covered = j.at("covered").get<bool>();
  r.cal_queries = j.at("cal_queries").get<std::size_t>();
  r.test_queries = j.at("test_queries").get<std::size_t>();
  return r;
}

inline nlohmann::json to_json(const CoverageReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& rec : r.records) trials.push_back(to_json(rec));
  return {{"schema_version", kReportSchemaVersion},
          {"kind", "coverage"},
          {"trials", r.trials},
          {"covered", r.covered},
          {"covered_all", r.covered_all},
          {"abstentions", r.abstentions},
          {"coverage_rate", detail::opt(r.coverage_rate)},
          {"coverage_rate_all", r.coverage_rate_all},
          {"settings", r.settings},
          {"records", std::move(trials)}};
}

inline CoverageReport coverage_report_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kReportSchemaVersion || j.at("kind") != "coverage")
    throw ValidationError("not a coverage report of schema version " + std::to_string(kReportSchemaVersion));
  CoverageReport r;
  r.trials = j.at("trials").get<std::size_t>();
  r.covered = j.at("covered").get<std::size_t>();
  r.covered_all = j.at("covered_all").get<std::size_t>();
  r.abstentions = j.at("abstentions").get<std::size_t>();
  r.coverage_rate = detail::opt_from(j.at("coverage_rate"));
  r.coverage_rate_all = j.at("coverage_rate_all").get<double>();
  r.settings = j.at("settings");
  for (const auto& rec : j.at("records")) r.records.push_back(trial_record_from_json(rec));
  return r;
}

inline nlohmann::json to_json(const TradeoffRow& r) {
  return {{"lambda", r.lambda},
          {"mean_ndcg", r.mean_ndcg},
          {"mean_risk", r.mean_risk},
          {"mean_disparity", r.mean_disparity},
          {"mean_disparity_raw", r.mean_disparity_raw}};
}

inline TradeoffRow tradeoff_row_from_json(const nlohmann::json& j) {
  return {j.at("lambda").get<double>(), j.at("mean_ndcg").get<double>(), j.at("mean_risk").get<double>(),
          j.at("mean_disparity").get<double>(), j.at("mean_disparity_raw").get<double>()};
}

inline nlohmann::json to_json(const TradeoffCurve& c) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : c.rows) rows.push_back(to_json(r));
  auto flag = [](const std::optional<bool>& b) { return b ? nlohmann::json(*b) : nlohmann::json(nullptr); };
  return {{"schema_version", kReportSchemaVersion},
          {"kind", "tradeoff"},
          {"p_max_global", c.p_max_global},
          {"pl_reference", to_json(c.pl_reference)},
          {"det_reference", to_json(c.det_reference)},
          {"pl_endpoint_matches", flag(c.pl_endpoint_matches)},
          {"det_endpoint_matches", flag(c.det_endpoint_matches)},
          {"settings", c.settings},
          {"rows", std::move(rows)}};
}

inline TradeoffCurve tradeoff_curve_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kReportSchemaVersion || j.at("kind") != "tradeoff")
    throw ValidationError("not a trade-off report of schema version " + std::to_string(kReportSchemaVersion));
  TradeoffCurve c;
  c.p_max_global = j.at("p_max_global").get<double>();
  c.pl_reference = tradeoff_row_from_json(j.at("pl_reference"));
  c.det_reference = tradeoff_row_from_json(j.at("det_reference"));
  auto flag = [](const nlohmann::json& f) { return f.is_null() ? std::nullopt : std::optional<bool>(f.get<bool>()); };
  c.pl_endpoint_matches = flag(j.at("pl_endpoint_matches"));
  c.det_endpoint_matches = flag(j.at("det_endpoint_matches"));
  c.settings = j.at("settings");
  for (const auto& r : j.at("rows")) c.rows.push_back(tradeoff_row_from_json(r));
  return c;
}

inline constexpr const char* kCoverageCsvHeader =
    "trial,abstained,lambda_hat,lambda_used,alpha,u_star,test_ndcg,test_risk,test_disparity,det_ndcg,det_risk,"
    "det_disparity,covered";
inline constexpr const char* kTradeoffCsvHeader = "lambda,mean_ndcg,mean_risk,mean_disparity,mean_disparity_raw";

inline std::string to_csv(const CoverageReport& r) {
  std::string out = std::string(kCoverageCsvHeader) + "\n";
  for (const auto& t : r.records) {
    out += std::to_string(t.trial) + (t.abstained ? ",1," : ",0,") + (t.lambda_hat ? detail::num(*t.lambda_hat) : "");
    for (double v : {t.lambda_used, t.alpha, t.u_star, t.test_ndcg, t.test_risk, t.test_disparity, t.det_ndcg,
                     t.det_risk, t.det_disparity})
      out += "," + detail::num(v);
    out += t.covered ? ",1\n" : ",0\n";
  }
  return out;
}

inline std::string to_csv(const TradeoffCurve& c) {
  std::string out = std::string(kTradeoffCsvHeader) + "\n";
  for (const auto& r : c.rows)
    out += detail::num(r.lambda) + "," + detail::num(r.mean_ndcg) + "," + detail::num(r.mean_risk) + "," +
           detail::num(r.mean_disparity) + "," + detail::num(r.mean_disparity_raw) + "\n";
  return out;
}

inline void emit_report(const CoverageReport& r, const std::string& path, ReportFormat format) {
  if (r.records.empty()) throw ValidationError("refusing to write a coverage report with no trials");
  detail::write_text(path, format == ReportFormat::json ? to_json(r).dump(2) + "\n" : to_csv(r));
}

inline void emit_report(const TradeoffCurve& c, const std::string& path, ReportFormat format) {
  if (c.rows.empty()) throw ValidationError("refusing to write a trade-off report with an empty sweep grid");
  detail::write_text(path, format == ReportFormat::json ? to_json(c).dump(2) + "\n" : to_csv(c));
}

}  // namespace fairrank
