#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cover/scorer.hpp"
#include "cover/trace.hpp"

namespace cover {

// Cluster ids: 0 is the null cluster, 1..M are regular clusters.
using ClusterId = int;
inline constexpr ClusterId kNullCluster = 0;

std::string cluster_name(ClusterId m);                // "null" or "3"
ClusterId parse_cluster_name(const std::string& name);

// Per step-bucket map from token to cluster. Buckets are consecutive
// fixed-width groups of steps; tokens absent from a bucket map to null.
struct ClusterAssignment {
  int clusters = 0;      // M
  int bucket_width = 1;
  int max_len = 0;       // L
  std::vector<std::map<Token, ClusterId>> buckets;

  // Assignment where every token is null at every step.
  static ClusterAssignment all_null(int max_len);

  int bucket_count() const noexcept { return static_cast<int>(buckets.size()); }
  int bucket_of(int step) const;  // step is 1-based
  ClusterId cluster_of(int step, Token token) const;

  nlohmann::json to_json() const;
  static ClusterAssignment from_json(const nlohmann::json& doc, int clusters, int bucket_width,
                                     int max_len);
};

// How raw scores are mapped before thresholds are learned and compared.
// Both scales are order preserving, so set membership is identical; the
// scale only matters where threshold values are summed or averaged.
enum class ScoreScale { Raw, Log };

double scale_score(ScoreScale scale, double raw);
std::string to_string(ScoreScale scale);
ScoreScale parse_score_scale(const std::string& name);

// Per-step, per-cluster conformal thresholds: a prefix ending in token a at
// step l is kept iff scale(score) >= table[l-1][cluster_of(l, a)].
struct StepThresholds {
  ScoreScale scale = ScoreScale::Raw;
  ClusterAssignment assignment;
  std::vector<std::vector<double>> table;  // [step-1][cluster], cluster 0 = null

  int max_len() const noexcept { return static_cast<int>(table.size()); }
  ClusterId cluster_of(int step, Token token) const { return assignment.cluster_of(step, token); }
  // +infinity past max_len or for clusters outside the table.
  double threshold(int step, ClusterId m) const;
  bool admits(int step, Token token, double raw_score) const;
};

// Per-step outcome of checking one trace against a StepThresholds rule.
struct StepCheck {
  int step = 0;
  ClusterId cluster = kNullCluster;
  double score = 0.0;      // on the rule's scale
  double threshold = 0.0;
  bool passed = false;
};

// Full-path evaluation of one trace. Steps after the first failure are
// recorded with passed = false.
struct PathEvalRecord {
  std::string trace_id;
  std::vector<StepCheck> steps;
  std::optional<std::pair<int, ClusterId>> first_failure;
  bool covered = true;
};

// Product over steps of I[score >= threshold]; the record names the first
// failing (step, cluster) if any.
PathEvalRecord evaluate_path(const ScoreTrace& trace, const StepThresholds& rule);

struct DecodeLimits {
  std::size_t max_nodes = 5'000'000;
};

struct DecodeResult {
  // Completed members of the conformal set (terminated or at max length),
  // sorted lexicographically, with their raw scores.
  std::vector<std::vector<Token>> sequences;
  std::vector<double> scores;
  // Number of prefixes admitted across all steps.
  std::size_t expanded_nodes = 0;
  std::vector<std::size_t> admitted_per_step;
};

// Frontier expansion C^(l) = { p + a : p in C^(l-1), rule admits (l, a, score(p + a)) }
// until every member terminates or max_len is reached. Prefix-closed by
// construction. Throws CapacityError when more than limits.max_nodes prefixes
// would be admitted.
DecodeResult conformal_expand(const Scorer& scorer, const StepThresholds& rule, int max_len,
                              const DecodeLimits& limits = {});

}  // namespace cover
