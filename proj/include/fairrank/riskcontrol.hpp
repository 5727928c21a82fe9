#pragma once

// Threshold selection with distribution-free risk control.
//
// A candidate threshold lambda is certified when the calibration evidence
// rejects "risk(lambda) > alpha" at level delta, either through the
// Hoeffding-Bentkus p-value or the DKWM upper confidence bound. Both are
// applied to the monotone envelope R~(lambda) = max_{t >= lambda} R^(t),
// which is non-increasing in lambda, and the certified set is the longest
// grid suffix whose members all pass. The smallest certified lambda keeps
// the largest prediction sets and hence the most exposure spread.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairrank/dataset.hpp"
#include "fairrank/error.hpp"
#include "fairrank/metrics.hpp"
#include "fairrank/plmodel.hpp"
#include "json.hpp"

namespace fairrank {

// Binary KL divergence KL(Bern(a) || Bern(b)) for 0 <= a <= b, 0 < b < 1,
// with 0 log 0 = 0.
inline double h1(double a, double b) {
  if (!(a >= 0.0 && a <= 1.0) || !(b > 0.0 && b < 1.0))
    throw DomainError("h1 needs a in [0, 1] and b in (0, 1)");
  if (a > b) throw DomainError("h1 needs a <= b; clamp a to min(r_hat, alpha) first");
  const double left = a == 0.0 ? 0.0 : a * std::log1p((a - b) / b);
  const double right = a == 1.0 ? 0.0 : (1.0 - a) * std::log1p((b - a) / (1.0 - b));
  return std::max(0.0, left + right);
}

namespace detail {

// Error of Stirling's approximation, log(n!) - log(sqrt(2 pi n) (n/e)^n).
inline double stirlerr(double n) {
  constexpr double s0 = 1.0 / 12.0, s1 = 1.0 / 360.0, s2 = 1.0 / 1260.0, s3 = 1.0 / 1680.0,
                   s4 = 1.0 / 1188.0;
  if (n <= 15.0) {
    // log(n!) is accurate here since n! < 2^53; long double absorbs the cancellation.
    const long double ln = static_cast<long double>(n);
    const long double r = std::lgamma(ln + 1.0L) - (ln + 0.5L) * std::log(ln) + ln -
                          0.5L * std::log(2.0L * std::numbers::pi_v<long double>);
    return static_cast<double>(r);
  }
  const double nn = n * n;
  if (n > 500) return (s0 - s1 / nn) / n;
  if (n > 80) return (s0 - (s1 - s2 / nn) / nn) / n;
  if (n > 35) return (s0 - (s1 - (s2 - s3 / nn) / nn) / nn) / n;
  return (s0 - (s1 - (s2 - (s3 - s4 / nn) / nn) / nn) / nn) / n;
}

// Deviance term x log(x / np) + np - x, evaluated without cancellation.
inline double bd0(double x, double np) {
  if (std::abs(x - np) < 0.1 * (x + np)) {
    double v = (x - np) / (x + np);
    double s = (x - np) * v;
    double ej = 2.0 * x * v;
    v *= v;
    for (int j = 1; j < 1000; ++j) {
      ej *= v;
      const double s1 = s + ej / (2 * j + 1);
      if (s1 == s) return s1;
      s = s1;
    }
    return s;
  }
  return x * std::log(x / np) + np - x;
}

}  // namespace detail

// log P(Bin(n, p) = x), by Loader's saddle-point expansion.
inline double log_binomial_pmf(std::uint64_t n, double p, std::uint64_t x) {
  const double q = 1.0 - p;
  const double nd = static_cast<double>(n), xd = static_cast<double>(x);
  if (x == 0) return p < 0.1 ? -detail::bd0(nd, nd * q) - nd * p : nd * std::log(q);
  if (x == n) return q < 0.1 ? -detail::bd0(nd, nd * p) - nd * q : nd * std::log(p);
  const double lc = detail::stirlerr(nd) - detail::stirlerr(xd) - detail::stirlerr(nd - xd) -
                    detail::bd0(xd, nd * p) - detail::bd0(nd - xd, nd * q);
  const double lf = std::log(2.0 * std::numbers::pi) + std::log(xd) + std::log1p(-xd / nd);
  return lc - 0.5 * lf;
}

inline void check_binomial_args(std::uint64_t n, double p, std::uint64_t j) {
  if (n < 1) throw DomainError("binomial tail needs n >= 1");
  if (!(p > 0.0 && p < 1.0)) throw DomainError("binomial tail needs p in (0, 1)");
  if (j > n) throw DomainError("binomial tail needs 0 <= j <= n");
}

// log P(Bin(n, p) <= j), summing exact pmf terms in log space.
inline double log_binomial_tail(std::uint64_t n, double p, std::uint64_t j) {
  check_binomial_args(n, p, j);
  if (j == n) return 0.0;
  std::vector<double> terms(j + 1);
  for (std::uint64_t i = 0; i <= j; ++i) terms[i] = log_binomial_pmf(n, p, i);
  const double top = *std::max_element(terms.begin(), terms.end());
  if (top == -std::numeric_limits<double>::infinity()) return top;
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - top);
  return std::min(0.0, top + std::log(sum));
}

inline double binomial_tail(std::uint64_t n, double p, std::uint64_t j) {
  return std::exp(log_binomial_tail(n, p, j));
}

// ceil(n * r_hat), ignoring float noise below 1e-9 in the loss sum.
inline std::uint64_t bentkus_count(std::uint64_t n, double r_hat) {
  const double c = std::ceil(static_cast<double>(n) * r_hat - 1e-9);
  return static_cast<std::uint64_t>(std::clamp(c, 0.0, static_cast<double>(n)));
}

inline void check_hb_args(double r_hat, std::uint64_t n, double alpha) {
  if (!(r_hat >= 0.0 && r_hat <= 1.0)) throw DomainError("HB p-value needs r_hat in [0, 1]");
  if (n < 1) throw DomainError("HB p-value needs n >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("HB p-value needs alpha in (0, 1)");
}

// log of the Hoeffding-Bentkus p-value (stays finite where the p-value underflows).
inline double hb_log_p_value(double r_hat, std::uint64_t n, double alpha) {
  check_hb_args(r_hat, n, alpha);
  const double log_hoeffding = -static_cast<double>(n) * h1(std::min(r_hat, alpha), alpha);
  const double log_bentkus = 1.0 + log_binomial_tail(n, alpha, bentkus_count(n, r_hat));
  return std::min(log_hoeffding, log_bentkus);
}

// min(exp(-n h1(r_hat ^ alpha, alpha)), e P(Bin(n, alpha) <= ceil(n r_hat)))
inline double hb_p_value(double r_hat, std::uint64_t n, double alpha) {
  return std::exp(hb_log_p_value(r_hat, n, alpha));
}

// Sum of adjacent gaps of sorted distinct loss levels. The sum telescopes,
// so it is returned as max - min, free of accumulated rounding.
inline double dkwm_constant(std::span<const double> levels) {
  if (levels.empty()) throw DomainError("DKWM constant needs at least one loss level");
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (!(levels[i] > levels[i - 1])) throw DomainError("loss levels must be sorted ascending and distinct");
  return levels.back() - levels.front();
}

inline double dkwm_ucb(double r_tilde, std::uint64_t n, double delta, double constant) {
  if (n < 1 || !(delta > 0.0 && delta < 1.0) || !(constant >= 0.0))
    throw DomainError("DKWM UCB needs n >= 1, delta in (0, 1), const >= 0");
  return r_tilde + constant * std::sqrt(std::log(2.0 / delta) / (2.0 * static_cast<double>(n)));
}

// Smallest alpha for which the two-sided DKWM argument gives
// P(E[R] < alpha) >= 1 - delta. Diagnostic only.
inline double dkwm_alpha_floor(double r_hat, std::uint64_t n, double delta, double constant) {
  return r_hat + 2.0 * constant * std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(n)));
}

enum class Bound { hb, dkwm };
enum class GridMode { uniform, quantile };

inline const char* to_string(Bound b) { return b == Bound::hb ? "hb" : "dkwm"; }
inline const char* to_string(GridMode g) { return g == GridMode::uniform ? "uniform" : "quantile"; }

struct RiskSpec {
  double alpha = 0.1;
  double delta = 0.1;
  Bound bound = Bound::hb;
  GridMode grid_mode = GridMode::uniform;
  std::size_t grid_points = 101;
  std::vector<double> grid;  // resolved candidates, strictly ascending
  // DKWM constant; empty means "derive from the observed per-query losses".
  std::optional<double> dkwm_const = 1.0;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in (0, 1]");
    if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("delta must lie in (0, 1)");
    if (grid_points < 1) throw ValidationError("grid needs at least one point");
    if (dkwm_const && !(*dkwm_const >= 0.0)) throw ValidationError("DKWM constant must be >= 0");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!(grid[i] >= 0.0) || !std::isfinite(grid[i])) throw ValidationError("grid values must be finite and >= 0");
      if (i > 0 && !(grid[i] > grid[i - 1])) throw ValidationError("grid must be strictly ascending");
    }
  }
};

// Candidate thresholds over [0, p_max] (uniform) or at empirical quantiles of
// all RC scores in the table (quantile). Duplicates are dropped.
inline std::vector<double> make_grid(GridMode mode, std::size_t points, const RcScoreTable& table) {
  if (points < 1) throw ValidationError("grid needs at least one point");
  std::vector<double> grid;
  if (points == 1) return {0.0};
  if (mode == GridMode::uniform) {
    for (std::size_t i = 0; i < points; ++i)
      grid.push_back(table.p_max_global * static_cast<double>(i) / static_cast<double>(points - 1));
  } else {
    std::vector<double> all;
    for (const auto& row : table.rows) all.insert(all.end(), row.rc.begin(), row.rc.end());
    if (all.empty()) throw ValidationError("quantile grid needs RC scores");
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < points; ++i) {
      const double pos = static_cast<double>(all.size() - 1) * static_cast<double>(i) / static_cast<double>(points - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, all.size() - 1);
      grid.push_back(all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]));
    }
  }
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

// R~(lambda_i) = max_{j >= i} R^(lambda_j) over an ascending grid.
inline std::vector<double> monotone_envelope(std::span<const double> r_hat) {
  std::vector<double> env(r_hat.begin(), r_hat.end());
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  return env;
}

struct RiskCurve {
  std::vector<double> lambdas;
  std::vector<double> r_hat;
  std::vector<double> r_tilde;
  std::vector<double> disparity;      // mean normalized disparity on the same samples
  std::vector<double> disparity_raw;  // mean unnormalized disparity
  std::uint64_t n = 0;                // calibration queries
  Estimator estimator = Estimator::monte_carlo;
  double observed_loss_span = 1.0;    // dkwm_constant of the observed per-query risks
};

// Builds a curve from precomputed empirical risks (disparities left at 0).
inline RiskCurve make_risk_curve(std::vector<double> lambdas, std::vector<double> r_hat, std::uint64_t n) {
  if (lambdas.size() != r_hat.size()) throw DomainError("lambda and risk vectors differ in length");
  RiskCurve c;
  c.r_tilde = monotone_envelope(r_hat);
  c.disparity.assign(lambdas.size(), 0.0);
  c.disparity_raw.assign(lambdas.size(), 0.0);
  c.lambdas = std::move(lambdas);
  c.r_hat = std::move(r_hat);
  c.n = n;
  return c;
}

// Empirical risk and disparity at every grid threshold on the calibration
// queries. Monte Carlo rankings share uniforms across the grid; exact
// enumeration is used when every query is small enough, unless overridden.
inline RiskCurve build_risk_curve(const QueryCollection& cal, const RcScoreTable& table, const TplConfig& config,
                                  const RiskSpec& spec, std::uint64_t seed,
                                  std::optional<Estimator> estimator = std::nullopt,
                                  FairnessOptions fairness = {}) {
  config.validate();
  spec.validate();
  if (spec.grid.empty()) throw ValidationError("risk curve needs a non-empty grid");
  if (cal.empty()) throw ValidationError("risk curve needs calibration queries");
  const Estimator est = estimator.value_or(choose_estimator(cal));
  const std::size_t g = spec.grid.size();
  std::vector<double> risk_sum(g, 0.0), disp_sum(g, 0.0), raw_sum(g, 0.0);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t qi = 0; qi < cal.size(); ++qi) {
    const auto& q = cal.queries[qi];
    const auto evals = evaluate_query_grid(q, table.rows[qi], config, spec.grid, est, query_stream_key(seed, q.qid));
    for (std::size_t i = 0; i < g; ++i) {
      risk_sum[i] += evals[i].risk;
      lo = std::min(lo, evals[i].risk);
      hi = std::max(hi, evals[i].risk);
      disp_sum[i] += sq_disparity(q, evals[i].exposure, fairness.scale, PairNormalization::ordered_pairs);
      raw_sum[i] += sq_disparity(q, evals[i].exposure, fairness.scale, PairNormalization::none);
    }
  }
  const double n = static_cast<double>(cal.size());
  for (std::size_t i = 0; i < g; ++i) {
    risk_sum[i] /= n;
    disp_sum[i] /= n;
    raw_sum[i] /= n;
  }
  RiskCurve curve = make_risk_curve(spec.grid, std::move(risk_sum), cal.size());
  curve.disparity = std::move(disp_sum);
  curve.disparity_raw = std::move(raw_sum);
  curve.estimator = est;
  curve.observed_loss_span = hi > lo ? dkwm_constant(std::vector<double>{lo, hi}) : 0.0;
  return curve;
}

struct LambdaDiagnostics {
  double lambda = 0.0;
  double r_hat = 0.0;
  double r_tilde = 0.0;
  double statistic = 0.0;  // HB p-value or DKWM UCB
  double disparity = 0.0;
  double disparity_raw = 0.0;
  double dkwm_alpha_floor = 0.0;
  bool certified = false;
};

struct CalibrationResult {
  std::optional<double> lambda_hat;  // empty: abstain
  std::vector<double> certified;     // ascending suffix of the grid
  std::vector<LambdaDiagnostics> grid;
  double alpha = 0.0;
  double delta = 0.0;
  Bound bound = Bound::hb;
  std::uint64_t n = 0;
  double dkwm_const = 1.0;

  bool abstained() const noexcept { return !lambda_hat.has_value(); }
};

// Threshold used when calibration abstains: 1 is at least every RC score, so
// TPL collapses to the deterministic ranking.
constexpr double abstention_fallback() noexcept { return 1.0; }

inline CalibrationResult select_threshold(const RiskCurve& curve, const RiskSpec& spec) {
  spec.validate();
  if (!spec.grid.empty() && spec.grid != curve.lambdas)
    throw DomainError("risk curve was built on a different grid than the spec's");
  if (curve.r_hat.size() != curve.lambdas.size() || curve.r_tilde.size() != curve.lambdas.size())
    throw DomainError("malformed risk curve");
  if (curve.n < 1) throw DomainError("risk curve has no calibration queries");

  CalibrationResult out;
  out.alpha = spec.alpha;
  out.delta = spec.delta;
  out.bound = spec.bound;
  out.n = curve.n;
  out.dkwm_const = spec.dkwm_const.value_or(curve.observed_loss_span);

  const std::size_t g = curve.lambdas.size();
  const bool vacuous = spec.alpha >= 1.0;
  out.grid.resize(g);
  for (std::size_t i = 0; i < g; ++i) {
    auto& d = out.grid[i];
    d.lambda = curve.lambdas[i];
    d.r_hat = curve.r_hat[i];
    d.r_tilde = curve.r_tilde[i];
    d.disparity = i < curve.disparity.size() ? curve.disparity[i] : 0.0;
    d.disparity_raw = i < curve.disparity_raw.size() ? curve.disparity_raw[i] : 0.0;
    d.dkwm_alpha_floor = dkwm_alpha_floor(d.r_hat, curve.n, spec.delta, out.dkwm_const);
    if (spec.bound == Bound::dkwm)
      d.statistic = dkwm_ucb(d.r_tilde, curve.n, spec.delta, out.dkwm_const);
    else  // risks never exceed 1, so "risk > 1" is rejected with certainty
      d.statistic = vacuous ? 0.0 : hb_p_value(std::clamp(d.r_tilde, 0.0, 1.0), curve.n, spec.alpha);
  }
  // Fixed-sequence scan from the largest threshold down; stop at the first failure.
  for (std::size_t i = g; i-- > 0;) {
    const auto& d = out.grid[i];
    const bool pass = vacuous || (spec.bound == Bound::hb ? d.statistic < spec.delta : d.statistic < spec.alpha);
    if (!pass) break;
    out.grid[i].certified = true;
    out.certified.insert(out.certified.begin(), d.lambda);
  }
  if (!out.certified.empty()) out.lambda_hat = out.certified.front();
  return out;
}

inline nlohmann::json to_json(const CalibrationResult& r) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& d : r.grid)
    grid.push_back({{"lambda", d.lambda},
                    {"r_hat", d.r_hat},
                    {"r_tilde", d.r_tilde},
                    {"p_or_ucb", d.statistic},
                    {"disparity", d.disparity},
                    {"disparity_raw", d.disparity_raw},
                    {"dkwm_alpha_floor", d.dkwm_alpha_floor},
                    {"certified", d.certified}});
  nlohmann::json j = {{"schema_version", 1},
                      {"outcome", r.abstained() ? "abstain" : "selected"},
                      {"alpha", r.alpha},
                      {"delta", r.delta},
                      {"bound", to_string(r.bound)},
                      {"n", r.n},
                      {"dkwm_const", r.dkwm_const},
                      {"certified", r.certified},
                      {"grid", std::move(grid)}};
  if (r.lambda_hat) j["lambda_hat"] = *r.lambda_hat;
  return j;
}

}  // namespace fairrank
