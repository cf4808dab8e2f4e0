#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cover/conformal_set.hpp"

namespace cover {

// mean + sqrt(2 var log(3/delta) / n) + 3 log(3/delta) / n, values in [0, 1].
double empirical_bernstein(double mean, double var, std::size_t n, double delta);
double bernstein_slack(double var, std::size_t n, double delta);

// min(1, p_hat + sqrt(log(2/zeta) / (2n))).
double hoeffding_upper(double p_hat, std::size_t n, double zeta);
double hoeffding_slack(std::size_t n, double zeta);

// delta-quantile of Beta(a, b) by bisection on the regularized incomplete
// beta function; absolute tolerance 1e-10.
double beta_quantile(double delta, double a, double b);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double x, double a, double b);

// Lower confidence bound (1 - alpha) * B(delta; |B|, N + 1 - |B|) on the
// coverage of beam-subgroup conformal prediction, |B| the in-beam count.
double beam_subgroup_coverage_bound(double alpha, double delta, std::size_t in_beam, std::size_t total);

struct PairStats {
  int step = 0;
  ClusterId cluster = kNullCluster;
  std::size_t n_lm = 0;      // traces reaching step l alive with cluster m
  std::size_t failures = 0;  // of those, traces failing at step l
  double eps_hat = 0.0;
  double v_hat = 0.0;        // eps_hat (1 - eps_hat), biased normalizer
  double p_hat = 0.0;        // n_lm / N
  double delta = 0.0;
  double zeta = 0.0;
};

// Which count goes under the log(2/zeta) term of the error-side slack.
enum class ZetaDenominator { PairCount, Total };
enum class BoundVariant { Main, Appendix };

std::string to_string(ZetaDenominator d);
std::string to_string(BoundVariant v);
ZetaDenominator parse_zeta_denominator(const std::string& name);
BoundVariant parse_bound_variant(const std::string& name);

struct PairBound {
  PairStats stats;
  double frequency_factor = 1.0;  // hoeffding_upper(p_hat, N, zeta), in [0, 1]
  double error_factor = 1.0;      // empirical_bernstein(eps_hat, v_hat, n_lm, delta), clipped to [0, 1]
  double bound = 1.0;             // frequency_factor * error_factor
  bool vacuous = false;           // n_lm = 0, error factor replaced by 1
};

// Per-pair bound on P(first failure at (l, m)).
PairBound pair_failure_bound(const PairStats& stats, std::size_t total);

struct PairTerm {
  int step = 0;
  ClusterId cluster = kNullCluster;
  double bernstein_term = 0.0;  // p_hat * bernstein_slack(v_hat, n_lm, delta)
  double hoeffding_term = 0.0;  // eps_hat * hoeffding_slack(n, zeta)
};

struct BoundReport {
  BoundVariant variant = BoundVariant::Main;
  ZetaDenominator zeta_denominator = ZetaDenominator::PairCount;
  std::size_t total = 0;  // N
  double base = 0.0;      // alpha (main) or empirical path non-coverage (appendix)
  std::vector<PairTerm> terms;
  std::vector<PairBound> pairs;
  double bernstein_sum = 0.0;
  double hoeffding_sum = 0.0;
  double aggregate = 0.0;          // base + bernstein_sum + hoeffding_sum
  double aggregate_clipped = 0.0;  // min(1, aggregate)
  double total_confidence = 0.0;   // sum of delta + zeta over pairs

  nlohmann::json to_json() const;
};

// Full-path failure bound: base + sum over pairs of the two slack terms.
// Throws ValidationError on duplicate (l, m) keys or when the confidence
// budget sum(delta + zeta) is not below 1.
BoundReport full_path_bound(std::span<const PairStats> stats, double base, BoundVariant variant,
                            std::size_t total, ZetaDenominator zeta_denominator = ZetaDenominator::PairCount);

// Pair statistics from evaluation records. delta and zeta are split evenly
// across the pairs with n_lm > 0; pairs never reached are not reported.
std::vector<PairStats> pair_stats(std::span<const PathEvalRecord> records, double delta, double zeta);

// Empirical full-path non-coverage of the records.
double empirical_noncoverage(std::span<const PathEvalRecord> records);

struct DecompositionAudit {
  std::size_t total = 0;
  std::size_t covered = 0;
  std::size_t uncovered = 0;
  std::map<std::pair<int, ClusterId>, std::size_t> cells;  // first-failure tallies
  std::size_t cell_sum = 0;
  std::vector<std::string> violations;
  bool ok() const noexcept { return violations.empty(); }
};

// Exact integer check that first-failure tallies partition the uncovered
// traces. When `expected` is given, each tally must also equal the expected
// failure count of its pair.
DecompositionAudit decomposition_audit(
    std::span<const PathEvalRecord> records,
    const std::optional<std::map<std::pair<int, ClusterId>, std::size_t>>& expected = std::nullopt);

}  // namespace cover
