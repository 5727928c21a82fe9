#pragma once

// The `fairrank` command line: option parsing, config-file precedence and
// the subcommand runners. Kept in a header so tests can drive it in-process.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fairrank/dataset.hpp"
#include "fairrank/error.hpp"
#include "fairrank/harness.hpp"
#include "fairrank/log.hpp"
#include "fairrank/metrics.hpp"
#include "fairrank/plmodel.hpp"
#include "fairrank/riskcontrol.hpp"
#include "json.hpp"

namespace fairrank::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitAllAbstained = 2;

struct RunConfig {
  std::string subcommand;

  std::string input;
  std::string scores;
  std::string format = "jsonl";
  std::string reference;    // dataset whose scores fit the normalization
  std::string calibration;  // calibration JSON for `evaluate`
  std::string out;          // empty: stdout
  std::string out_format = "json";

  std::size_t k = 5;
  double tau = 1.0;
  std::size_t mc_samples = 100;
  std::size_t test_mc_samples = 100;
  std::string estimator = "auto";
  std::string relevance_scale = "grade";
  int min_grade = 1;

  std::optional<double> alpha;
  std::optional<double> alpha_rel;
  double delta = 0.1;
  std::string bound = "hb";
  std::size_t grid_points = 101;
  std::string grid_mode = "uniform";
  std::string dkwm_const = "1";  // a number, or "observed"
  std::optional<double> lambda;

  std::size_t trials = 100;
  double cal_fraction = 0.25;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;

  SynthSpec synth;

  void validate() const {
    if (subcommand == "convert" && (input.empty() || scores.empty()))
      throw ValidationError("convert needs --input (SVMLight features) and --scores");
    if (subcommand == "convert" && out.empty()) throw ValidationError("convert needs --out");
    if (subcommand == "synth" && out.empty()) throw ValidationError("synth needs --out");
    if (subcommand != "synth" && subcommand != "convert" && input.empty())
      throw ValidationError(subcommand + " needs --input");
    if (format == "svmlight" && subcommand != "synth" && scores.empty())
      throw ValidationError("--format svmlight needs a --scores sidecar");
    if (subcommand == "evaluate" && !lambda && calibration.empty())
      throw ValidationError("evaluate needs --lambda or --calibration");
    if (alpha && alpha_rel) throw ValidationError("--alpha and --alpha-rel are mutually exclusive");
    if (alpha) AlphaMode::absolute(*alpha).validate();
    if (alpha_rel) AlphaMode::relative(*alpha_rel).validate();
    if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("--delta must lie in (0, 1)");
    if (lambda && !(*lambda >= 0.0)) throw ValidationError("--lambda must be >= 0");
    if (min_grade < 1 || min_grade > 4) throw ValidationError("--min-grade must lie in [1, 4]");
    if (trials < 1) throw ValidationError("--trials must be >= 1");
    if (test_mc_samples < 1) throw ValidationError("--test-mc-samples must be >= 1");
    tpl_config().validate();
    SplitSpec{cal_fraction, 0, 0}.validate();
    if (subcommand == "synth") synth.validate();
    (void)parsed_dkwm_const();
  }

  TplConfig tpl_config() const { return TplConfig::make(k, tau, 0.0, mc_samples); }

  AlphaMode alpha_mode() const {
    if (alpha_rel) return AlphaMode::relative(*alpha_rel);
    return AlphaMode::absolute(alpha.value_or(0.1));
  }

  std::optional<double> parsed_dkwm_const() const {
    if (dkwm_const == "observed") return std::nullopt;
    double v = 0.0;
    if (!detail::parse_double(dkwm_const, v) || !(v >= 0.0))
      throw ValidationError("--dkwm-const must be a number >= 0 or 'observed'");
    return v;
  }

  RiskSpec risk_spec() const {
    RiskSpec s;
    s.alpha = alpha.value_or(0.1);
    s.delta = delta;
    s.bound = bound == "dkwm" ? Bound::dkwm : Bound::hb;
    s.grid_mode = grid_mode == "quantile" ? GridMode::quantile : GridMode::uniform;
    s.grid_points = grid_points;
    s.dkwm_const = parsed_dkwm_const();
    return s;
  }

  std::optional<Estimator> estimator_override() const {
    if (estimator == "exact") return Estimator::exact;
    if (estimator == "mc") return Estimator::monte_carlo;
    return std::nullopt;
  }

  FairnessOptions fairness() const {
    return {relevance_scale == "gain" ? RelevanceScale::gain : RelevanceScale::grade};
  }

  ReportFormat report_format() const { return out_format == "csv" ? ReportFormat::csv : ReportFormat::json; }
};

// Registers every option on `app`; subcommands fall through to it, so
// options may appear before or after the subcommand name and in --config.
inline void build_app(CLI::App& app, RunConfig& c) {
  app.require_subcommand(1, 1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML-style file of option=value lines; command-line flags take precedence");

  app.add_option("--input", c.input, "Dataset: JSONL, or SVMLight features with --format svmlight (.gz accepted)");
  app.add_option("--scores", c.scores, "Score sidecar for SVMLight input, one number per line");
  app.add_option("--format", c.format, "Input format")->check(CLI::IsMember({"jsonl", "svmlight"}));
  app.add_option("--reference", c.reference, "JSONL dataset to fit score normalization on");
  app.add_option("--calibration", c.calibration, "Calibration JSON whose threshold `evaluate` applies");
  app.add_option("--out", c.out, "Output path (stdout when omitted)");
  app.add_option("--out-format", c.out_format, "Report format")->check(CLI::IsMember({"json", "csv"}));

  app.add_option("--k", c.k, "NDCG and ranking cutoff K")->check(CLI::PositiveNumber);
  app.add_option("--tau", c.tau, "Softmax temperature")->check(CLI::PositiveNumber);
  app.add_option("--mc-samples", c.mc_samples, "Monte Carlo rankings per query")->check(CLI::PositiveNumber);
  app.add_option("--test-mc-samples", c.test_mc_samples, "Monte Carlo rankings per test query in coverage runs")
      ->check(CLI::PositiveNumber);
  app.add_option("--estimator", c.estimator, "Risk estimator; auto uses exact enumeration when every query has n <= 8")
      ->check(CLI::IsMember({"auto", "mc", "exact"}));
  app.add_option("--relevance-scale", c.relevance_scale, "Relevance weight in the disparity")
      ->check(CLI::IsMember({"grade", "gain"}));
  app.add_option("--min-grade", c.min_grade, "Queries without a document of at least this grade are dropped");

  auto* a = app.add_option("--alpha", c.alpha, "Absolute risk target in (0, 1]");
  auto* ar = app.add_option("--alpha-rel", c.alpha_rel, "Relative target rho: alpha = 1 - rho * deterministic NDCG@K");
  a->excludes(ar);
  app.add_option("--delta", c.delta, "Tolerance delta in (0, 1)");
  app.add_option("--bound", c.bound, "Concentration bound")->check(CLI::IsMember({"hb", "dkwm"}));
  app.add_option("--grid-points", c.grid_points, "Candidate thresholds")->check(CLI::PositiveNumber);
  app.add_option("--grid-mode", c.grid_mode, "Candidate placement")->check(CLI::IsMember({"uniform", "quantile"}));
  app.add_option("--dkwm-const", c.dkwm_const, "DKWM constant, or 'observed' for the per-query risk span");
  app.add_option("--lambda", c.lambda, "Threshold for `evaluate`");

  app.add_option("--trials", c.trials, "Coverage trials")->check(CLI::PositiveNumber);
  app.add_option("--cal-fraction", c.cal_fraction, "Calibration share of each split");
  app.add_option("--seed", c.seed, "Master seed; drawn from the OS when omitted");
  app.add_option("--threads", c.threads, "Worker threads for coverage trials (0: all cores)");

  app.add_option("--num-queries", c.synth.num_queries, "synth: number of queries");
  app.add_option("--min-docs", c.synth.min_docs, "synth: fewest documents per query");
  app.add_option("--max-docs", c.synth.max_docs, "synth: most documents per query");
  app.add_option("--noise", c.synth.noise, "synth: gaussian score noise sigma");
  app.add_option("--tie-prob", c.synth.tie_cluster_prob, "synth: probability of a near-tied equal-grade cluster");

  const std::pair<const char*, const char*> subs[] = {
      {"synth", "Generate a synthetic pre-scored JSONL dataset"},
      {"convert", "Convert SVMLight features + score sidecar to JSONL"},
      {"calibrate", "Select a certified threshold on a calibration dataset"},
      {"evaluate", "Utility, risk and disparity at a fixed threshold"},
      {"sweep", "Utility/fairness trade-off over a threshold grid"},
      {"coverage", "Repeated split/calibrate/test coverage experiment"},
  };
  for (const auto& [name, desc] : subs)
    app.add_subcommand(name, desc)->fallthrough()->callback([&c, n = std::string(name)] { c.subcommand = n; });
}

namespace detail {

inline void write_output(const RunConfig& c, const std::string& text, std::ostream& out) {
  if (c.out.empty()) {
    out << text;
    return;
  }
  fairrank::detail::write_text(c.out, text);
  log::info("wrote " + c.out);
}

inline QueryCollection load_input(const RunConfig& c) {
  QueryCollection raw = c.format == "svmlight" ? parse_svmlight(c.input, c.scores) : parse_jsonl(c.input);
  auto filtered = filter_no_relevant(raw, c.min_grade);
  if (filtered.removed)
    log::info("dropped " + std::to_string(filtered.removed) + " queries without a document of grade >= " +
              std::to_string(c.min_grade));
  if (filtered.kept.empty()) throw ValidationError("no queries left in " + c.input + " after filtering");
  return std::move(filtered.kept);
}

inline std::optional<NormalizationStats> reference_stats(const RunConfig& c) {
  if (c.reference.empty()) return std::nullopt;
  return fit_normalization(parse_jsonl(c.reference));
}

inline nlohmann::json stats_json(const NormalizationStats& s, double tau) {
  return {{"mean", s.mean}, {"std", s.std}, {"tau", tau}};
}

inline int run_synth(const RunConfig& c) {
  SynthSpec spec = c.synth;
  spec.seed = *c.seed;
  write_jsonl(generate_synthetic(spec), c.out);
  log::info("wrote " + std::to_string(spec.num_queries) + " synthetic queries to " + c.out);
  return kExitOk;
}

inline int run_convert(const RunConfig& c) {
  const auto coll = parse_svmlight(c.input, c.scores);
  write_jsonl(coll, c.out);
  log::info("converted " + std::to_string(coll.size()) + " queries to " + c.out);
  return kExitOk;
}

inline int run_calibrate(const RunConfig& c, std::ostream& out) {
  const auto data = load_input(c);
  const TplConfig config = c.tpl_config();
  const auto stats = reference_stats(c).value_or(fit_normalization(data));
  const auto table = build_rc_table(data, stats, config.tau, DegeneratePolicy::uniform);
  RiskSpec spec = c.risk_spec();
  double u_star = 0.0;
  if (c.alpha_rel) {
    u_star = direct_deterministic_row(data, table, config).mean_ndcg;
    spec.alpha = 1.0 - *c.alpha_rel * u_star;
  }
  spec.grid = make_grid(spec.grid_mode, spec.grid_points, table);
  const auto curve = build_risk_curve(data, table, config, spec, *c.seed, c.estimator_override(), c.fairness());
  const auto result = select_threshold(curve, spec);
  if (result.abstained())
    log::warn("no threshold certified; deployment should fall back to lambda = 1 (deterministic ranking)");
  else
    log::info("selected lambda = " + nlohmann::json(*result.lambda_hat).dump());

  nlohmann::json j = to_json(result);
  j["normalization"] = stats_json(stats, config.tau);
  j["k"] = config.k;
  j["estimator"] = to_string(curve.estimator);
  if (c.alpha_rel) j["alpha_rel"] = {{"rho", *c.alpha_rel}, {"deterministic_ndcg", u_star}};
  if (c.report_format() == ReportFormat::csv) {
    std::string csv = "lambda,r_hat,r_tilde,statistic,disparity,disparity_raw,dkwm_alpha_floor,certified\n";
    for (const auto& d : result.grid) {
      for (double v : {d.lambda, d.r_hat, d.r_tilde, d.statistic, d.disparity, d.disparity_raw, d.dkwm_alpha_floor})
        csv += fairrank::detail::num(v) + ",";
      csv += d.certified ? "1\n" : "0\n";
    }
    write_output(c, csv, out);
  } else {
    write_output(c, j.dump(2) + "\n", out);
  }
  return kExitOk;
}

inline int run_evaluate(const RunConfig& c, std::ostream& out) {
  const auto data = load_input(c);
  TplConfig config = c.tpl_config();
  std::optional<NormalizationStats> stats = reference_stats(c);
  double lambda = c.lambda.value_or(abstention_fallback());
  if (!c.calibration.empty() && !c.lambda) {
    std::ifstream in(c.calibration);
    if (!in) throw IoError("cannot open " + c.calibration);
    nlohmann::json cal;
    try {
      cal = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(c.calibration, 0, e.what());
    }
    if (cal.contains("lambda_hat")) {
      lambda = cal.at("lambda_hat").get<double>();
    } else {
      log::warn("calibration abstained; evaluating the fallback lambda = 1");
    }
    if (!stats && cal.contains("normalization")) {
      const auto& n = cal.at("normalization");
      stats = NormalizationStats{n.at("mean").get<double>(), n.at("std").get<double>()};
      config.tau = n.at("tau").get<double>();
    }
  }
  config.lambdas = {lambda};
  config.validate();
  const auto st = stats.value_or(fit_normalization(data));
  const auto table = build_rc_table(data, st, config.tau, DegeneratePolicy::uniform);
  const Estimator est = c.estimator_override().value_or(choose_estimator(data));
  const auto m = evaluate_collection(data, table, config, est, *c.seed, c.fairness());
  if (c.report_format() == ReportFormat::csv) {
    write_output(c, metrics_csv(data, m), out);
  } else {
    nlohmann::json j = metrics_summary_json(m);
    j["schema_version"] = kReportSchemaVersion;
    j["lambda"] = lambda;
    j["normalization"] = stats_json(st, config.tau);
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t i = 0; i < data.size(); ++i)
      per.push_back({{"qid", data.queries[i].qid},
                     {"ndcg", m.utility.per_query_ndcg[i]},
                     {"risk", m.risk.per_query_risk[i]},
                     {"disparity", m.fairness.per_query_disparity[i]},
                     {"disparity_raw", m.fairness.per_query_raw[i]}});
    j["queries_detail"] = std::move(per);
    write_output(c, j.dump(2) + "\n", out);
  }
  return kExitOk;
}

inline int run_sweep(const RunConfig& c, std::ostream& out) {
  const auto data = load_input(c);
  const TplConfig config = c.tpl_config();
  const auto stats = reference_stats(c).value_or(fit_normalization(data));
  const auto table = build_rc_table(data, stats, config.tau, DegeneratePolicy::uniform);
  const auto grid = make_grid(c.risk_spec().grid_mode, c.grid_points, table);
  const auto curve = run_tradeoff_sweep(data, config, grid, *c.seed, stats, c.estimator_override(), c.fairness());
  if (curve.pl_endpoint_matches == false) log::warn("lambda = 0 row differs from the PL reference");
  if (curve.det_endpoint_matches == false) log::warn("top lambda row differs from the deterministic reference");
  write_output(c, c.report_format() == ReportFormat::json ? to_json(curve).dump(2) + "\n" : to_csv(curve), out);
  return kExitOk;
}

inline int run_coverage_cmd(const RunConfig& c, std::ostream& out) {
  const auto data = load_input(c);
  CoverageOptions opt;
  opt.trials = c.trials;
  opt.calibration_fraction = c.cal_fraction;
  opt.seed = *c.seed;
  opt.threads = c.threads;
  opt.test_mc_samples = c.test_mc_samples;
  opt.reference = reference_stats(c);
  opt.estimator = c.estimator_override();
  opt.fairness = c.fairness();
  const auto report = run_coverage(data, c.alpha_mode(), c.risk_spec(), c.tpl_config(), opt);
  log::info("coverage " + std::to_string(report.covered) + "/" + std::to_string(report.trials - report.abstentions) +
            " (abstentions " + std::to_string(report.abstentions) + ")");
  write_output(c, c.report_format() == ReportFormat::json ? to_json(report).dump(2) + "\n" : to_csv(report), out);
  if (report.abstentions == report.trials) {
    log::warn("every trial abstained");
    return kExitAllAbstained;
  }
  return kExitOk;
}

}  // namespace detail

inline int execute(RunConfig c, std::ostream& out = std::cout) {
  if (!c.seed) {
    c.seed = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    log::info("no --seed given; using seed " + std::to_string(*c.seed));
  }
  c.validate();
  if (c.subcommand == "synth") return detail::run_synth(c);
  if (c.subcommand == "convert") return detail::run_convert(c);
  if (c.subcommand == "calibrate") return detail::run_calibrate(c, out);
  if (c.subcommand == "evaluate") return detail::run_evaluate(c, out);
  if (c.subcommand == "sweep") return detail::run_sweep(c, out);
  if (c.subcommand == "coverage") return detail::run_coverage_cmd(c, out);
  throw ValidationError("unknown subcommand '" + c.subcommand + "'");
}

// Parses argv into a RunConfig (throws CLI::ParseError on bad usage) and
// returns the resolved configuration text, defaults included.
inline RunConfig parse_args(int argc, const char* const* argv, std::string* resolved = nullptr) {
  CLI::App app{"Calibrated thresholded Plackett-Luce ranking with risk control", "fairrank"};
  RunConfig c;
  build_app(app, c);
  app.parse(argc, argv);
  if (resolved) *resolved = app.config_to_str(true, false);
  return c;
}

inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Calibrated thresholded Plackett-Luce ranking with risk control", "fairrank"};
  RunConfig c;
  build_app(app, c);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (e.get_exit_code() != 0) err << app.help();
    return kExitError;
  }
  log::info("resolved config (" + c.subcommand + "):\n" + app.config_to_str(true, false));
  try {
    return execute(c, out);
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitError;
  }
}

}  // namespace fairrank::cli
