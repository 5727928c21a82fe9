// Calibrates a TPL threshold on synthetic data and checks it on held-out
// queries.
//
//   calibrate_synthetic [seed]

#include <cstdio>
#include <cstdlib>

#include "fairrank/fairrank.hpp"

int main(int argc, char** argv) {
  using namespace fairrank;
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;

  SynthSpec synth;
  synth.num_queries = 800;
  synth.seed = seed;
  const auto data = generate_synthetic(synth);
  const auto [cal, test] = split(data, SplitSpec{0.25, seed, 0});

  const auto stats = fit_normalization(cal);
  const auto cal_table = build_rc_table(cal, stats, 1.0);
  const auto test_table = build_rc_table(test, stats, 1.0);
  const TplConfig config = TplConfig::make(5, 1.0, 0.0, 100);

  RiskSpec spec;
  spec.alpha = 0.15;
  spec.delta = 0.1;
  spec.bound = Bound::hb;
  spec.grid = make_grid(GridMode::uniform, 101, cal_table);

  const auto curve = build_risk_curve(cal, cal_table, config, spec, seed);
  const auto result = select_threshold(curve, spec);
  const double lambda = result.lambda_hat.value_or(abstention_fallback());
  std::printf("%s lambda = %.4f (certified %zu of %zu candidates)\n", result.abstained() ? "abstained," : "selected",
              lambda, result.certified.size(), spec.grid.size());

  const auto tpl = evaluate_collection(test, test_table, config.with_lambda(lambda), Estimator::monte_carlo, seed + 1);
  const auto det = evaluate_collection(test, test_table, config.with_lambda(1.0), Estimator::monte_carlo, seed + 1);
  std::printf("test risk %.4f (target %.2f), NDCG@5 %.4f vs deterministic %.4f\n", tpl.risk.mean_risk, spec.alpha,
              tpl.utility.mean_ndcg, det.utility.mean_ndcg);
  std::printf("mean disparity %.5f vs deterministic %.5f\n", tpl.fairness.mean_disparity,
              det.fairness.mean_disparity);
  return 0;
}
