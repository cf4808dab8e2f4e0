#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cover/clustering.hpp"
#include "cover/conformal_set.hpp"
#include "cover/scorer.hpp"
#include "cover/trace.hpp"

namespace cover {

// Quantile levels beta[m][b] for cluster m in 0..M (0 = null) and step
// bucket b. All steps of a bucket share one column.
class BetaMatrix {
 public:
  BetaMatrix() = default;
  BetaMatrix(int clusters, int buckets, double fill = 0.0);

  int clusters() const noexcept { return clusters_; }
  int buckets() const noexcept { return buckets_; }

  double at(ClusterId m, int bucket) const;
  void set(ClusterId m, int bucket, double value);  // value must lie in [0, 1]

  const std::vector<double>& values() const noexcept { return values_; }

  nlohmann::json to_json() const;  // [[row m=0], [row m=1], ...]
  static BetaMatrix from_json(const nlohmann::json& doc);

  friend bool operator==(const BetaMatrix&, const BetaMatrix&) = default;

 private:
  std::size_t offset(ClusterId m, int bucket) const;
  int clusters_ = 0;
  int buckets_ = 0;
  std::vector<double> values_;
};

// Weight lambda_{l,m} on the error term of each (step, cluster) pair.
struct LambdaTable {
  double uniform = 1.0;
  std::map<std::pair<int, ClusterId>, double> overrides;

  double at(int step, ClusterId m) const;

  nlohmann::json to_json() const;
  static LambdaTable from_json(const nlohmann::json& doc);
};

std::string pair_key(int step, ClusterId m);  // "l:m", e.g. "3:null"
std::pair<int, ClusterId> parse_pair_key(const std::string& key);

// ---------------------------------------------------------------------------
// Reference quantities, computed directly from the traces
// ---------------------------------------------------------------------------

// Q_l(m; beta) = quantile(beta[m][bucket(l)], scores) where the scores are
// r^{1:l} (on `scale`) of D2 traces running at step l whose step-l token
// maps to m. The null cluster pools every trace running at step l. An empty
// index set gives +infinity.
double cluster_quantile(const BetaMatrix& beta, int step, ClusterId m, std::span<const ScoreTrace> d2,
                        const ClusterAssignment& assignment, ScoreScale scale = ScoreScale::Log);

// All Q_l(m; beta) for l in 1..assignment.max_len and m in 0..M.
StepThresholds cover_thresholds(const BetaMatrix& beta, std::span<const ScoreTrace> d2,
                                const ClusterAssignment& assignment, ScoreScale scale = ScoreScale::Log);

// Full-path indicator prod_l I[r^{1:l} >= Q_l(cluster of s^l)].
PathEvalRecord coverage_indicator(const ScoreTrace& trace, const StepThresholds& rule);

struct ClusterError {
  double value = 0.0;         // failures / survivors, 0 when survivors = 0
  std::size_t failures = 0;   // survivors failing at step l
  std::size_t survivors = 0;  // traces with cluster m at l that passed steps 1..l-1
};

// Among D2 traces whose step-l token maps to m and which passed every
// earlier step, the fraction failing at step l.
ClusterError empirical_cluster_error(int step, ClusterId m, const StepThresholds& rule,
                                     std::span<const ScoreTrace> d2);

struct ObjectiveValue {
  double value = 0.0;       // sum over (l, m) of Q_l(m) - lambda * eps_hat
  std::size_t covered = 0;  // traces with full-path indicator 1
  std::size_t total = 0;
  double coverage() const noexcept {
    return total == 0 ? 1.0 : static_cast<double>(covered) / static_cast<double>(total);
  }
};

// Pairs whose index set is empty (Q = +infinity) carry no information and are
// left out of the sum. Summation runs over l ascending, then m ascending.
ObjectiveValue objective(const BetaMatrix& beta, std::span<const ScoreTrace> d2,
                         const ClusterAssignment& assignment, const LambdaTable& lambda,
                         ScoreScale scale = ScoreScale::Log);

// ---------------------------------------------------------------------------
// Rank index used by the optimizer
// ---------------------------------------------------------------------------

// Precomputes, for every (trace, step), the number of index-set scores that
// are <= the trace's own score. A step passes under beta iff
// order_index(n_lm, beta) <= that count, so coverage and errors are exact
// integer computations with no threshold comparisons.
class CalibrationIndex {
 public:
  CalibrationIndex(std::span<const ScoreTrace> d2, const ClusterAssignment& assignment,
                   ScoreScale scale = ScoreScale::Log);

  std::size_t size() const noexcept { return steps_.size(); }
  int max_len() const noexcept { return max_len_; }
  int clusters() const noexcept { return assignment_.clusters; }
  int buckets() const noexcept { return assignment_.bucket_count(); }
  const ClusterAssignment& assignment() const noexcept { return assignment_; }

  std::size_t index_size(int step, ClusterId m) const;       // |I_2^l(m)|
  std::size_t bucket_members(ClusterId m, int bucket) const;  // (trace, step) samples mapped to m

  double threshold(const BetaMatrix& beta, int step, ClusterId m) const;
  std::size_t covered_count(const BetaMatrix& beta) const;
  ObjectiveValue objective(const BetaMatrix& beta, const LambdaTable& lambda) const;

 private:
  struct Cell {
    ClusterId cluster;
    std::uint32_t rank;
  };
  std::vector<std::vector<std::size_t>> order_table(const BetaMatrix& beta) const;

  ClusterAssignment assignment_;
  int max_len_ = 0;
  std::vector<std::vector<Cell>> steps_;                  // per trace
  std::vector<std::vector<std::vector<double>>> sorted_;  // [l-1][m], ascending
  std::vector<std::vector<std::size_t>> members_;         // [m][bucket]
};

// ---------------------------------------------------------------------------
// Greedy trade-off optimizer
// ---------------------------------------------------------------------------

// RaiseOnly raises the sampled coordinate until the coverage constraint would
// stop being strictly satisfied. Exchange moves slack between the anchor and
// the sampled coordinate in either direction: one side is lowered by the
// fewest grid steps that uncover another trace, the other is raised as in
// RaiseOnly, and the better of the two directions is proposed.
enum class TradeoffRule { RaiseOnly, Exchange };

std::string to_string(TradeoffRule rule);
TradeoffRule parse_tradeoff_rule(const std::string& name);

struct OptimizeOptions {
  double alpha = 0.1;
  LambdaTable lambda;
  std::size_t budget = 2000;
  double epsilon = 0.0;  // grid step for raises; 0 means 1 / |I_2|
  std::uint64_t seed = 0;
  TradeoffRule tradeoff = TradeoffRule::Exchange;
  std::optional<std::pair<ClusterId, int>> anchor;  // (cluster, bucket)
};

struct AuditEntry {
  std::size_t iteration = 0;
  ClusterId cluster = 0;
  int bucket = 0;
  BetaMatrix candidate;
  std::size_t covered_before = 0;
  std::size_t covered_after = 0;
  double objective_before = 0.0;
  double objective_after = 0.0;
  bool accepted = false;
};

struct OptimizeResult {
  BetaMatrix beta;
  BetaMatrix phase1_beta;
  std::pair<ClusterId, int> anchor{0, 0};
  ObjectiveValue phase1;
  ObjectiveValue final_value;
  double epsilon = 0.0;
  std::size_t need = 0;  // covered count meaning coverage >= 1 - alpha
  std::size_t accepted = 0;
  std::vector<AuditEntry> audit;
  std::vector<std::string> warnings;
};

// Covered-count targets on n traces at level alpha.
std::size_t required_count(std::size_t n, double alpha);  // coverage >= 1 - alpha
std::size_t strict_count(std::size_t n, double alpha);    // coverage >  1 - alpha
std::size_t phase1_count(std::size_t n, double alpha);    // coverage >= 1 - alpha + 1/n

// Phase 1 sets the anchor to 1 and everything else to 0, then lowers the
// anchor on the 1/|I_2| grid until coverage reaches 1 - alpha + 1/|I_2|.
// Phase 2 runs `budget` sampled trade-offs and keeps a candidate only if the
// objective strictly increases. Throws InfeasibleError when Phase 1 cannot
// reach its target.
OptimizeResult optimize(const CalibrationIndex& index, const OptimizeOptions& options);

struct AuditReplay {
  std::size_t checked = 0;
  std::vector<std::string> violations;
  bool ok() const noexcept { return violations.empty(); }
};

// Recomputes every logged candidate with the reference functions: coverage
// constraint after Phase 1 and after each acceptance, logged values, strict
// objective increase on acceptance, and the final state.
AuditReplay replay_audit(const OptimizeResult& result, std::span<const ScoreTrace> d2,
                         const ClusterAssignment& assignment, const OptimizeOptions& options,
                         ScoreScale scale = ScoreScale::Log);

// ---------------------------------------------------------------------------
// Calibration pipeline and persisted model
// ---------------------------------------------------------------------------

struct CoverConfig {
  double alpha = 0.1;
  LambdaTable lambda;
  int clusters = 4;
  std::size_t min_count = 20;
  int bucket_width = 1;
  std::vector<double> tau_grid = default_tau_grid();
  double gamma = 0.5;
  std::size_t budget = 2000;
  double epsilon = 0.0;
  ScoreScale scale = ScoreScale::Log;
  TradeoffRule tradeoff = TradeoffRule::Exchange;
  int max_len = 0;  // 0 means the longest calibration trace
  std::uint64_t seed = 0;
};

struct CalibratedModel {
  double alpha = 0.1;
  LambdaTable lambda;
  int clusters = 0;
  std::size_t min_count = 0;
  int bucket_width = 1;
  std::vector<double> tau_grid;
  double gamma = 0.5;
  std::size_t budget = 0;
  double epsilon = 0.0;
  ScoreScale scale = ScoreScale::Log;
  TradeoffRule tradeoff = TradeoffRule::Exchange;
  int max_len = 0;
  ClusterAssignment assignment;
  BetaMatrix beta;
  StepThresholds thresholds;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::size_t> counts;

  nlohmann::json to_json() const;
  static CalibratedModel from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static CalibratedModel load(const std::filesystem::path& path);
};

struct CalibrationResult {
  CalibratedModel model;
  CalibrationSplit split;
  AssignmentResult clustering;
  OptimizeResult optimization;
  std::vector<std::string> warnings;
};

// split -> cluster D1 -> optimize beta on D2 -> thresholds on D2.
CalibrationResult calibrate(std::span<const ScoreTrace> traces, const CoverConfig& config);

// Frontier expansion under the model's per-step, per-cluster thresholds.
DecodeResult cover_decode(const Scorer& scorer, const CalibratedModel& model, int max_len,
                          const DecodeLimits& limits = {});

}  // namespace cover
