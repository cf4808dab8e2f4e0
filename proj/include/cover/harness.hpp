#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cover/baseline.hpp"
#include "cover/cover.hpp"
#include "cover/scorer.hpp"

namespace cover {

enum class Method { Split, BeamSubgroup, Dcbs, Cover };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct ExperimentConfig {
  Method method = Method::Cover;
  LongTailConfig model;
  std::size_t n_cal = 5000;
  std::size_t n_eval = 5000;
  CoverConfig cover;   // alpha, lambda, M, ... for CoVeR; alpha is shared by every method
  int beam_width = 4;  // beam-subgroup only
  std::uint64_t seed = 0;
  int threads = 1;
  DecodeLimits limits;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
};

struct CellStats {
  int step = 0;
  ClusterId cluster = kNullCluster;
  std::size_t reached = 0;   // traces alive at step l with cluster m
  std::size_t failures = 0;  // first failures at (l, m)
  double coverage = 1.0;     // 1 - failures / reached
};

struct EvalReport {
  std::string method;
  std::size_t n_eval = 0;
  std::size_t covered = 0;
  double coverage = 0.0;
  // Every evaluation trace shares the same empty input, so the prediction set
  // is a single set and its mean and median sizes coincide.
  double mean_set_size = 0.0;
  double median_set_size = 0.0;
  std::size_t expanded_nodes = 0;
  std::vector<CellStats> cells;
  std::size_t uncovered_from_cells = 0;
  std::size_t tail_steps = 0;   // tail-token steps whose prefix survived
  std::size_t tail_passed = 0;
  double tail_step_coverage = 0.0;
  double runtime_seconds = 0.0;
  std::string eval_fingerprint;
  nlohmann::json config = nlohmann::json::object();

  // Runtime is wall-clock and is left out when include_runtime is false.
  nlohmann::json to_json(bool include_runtime = true) const;
  static EvalReport from_json(const nlohmann::json& doc);
};

// Hex digest over ids, tokens and scores, order-sensitive.
std::string fingerprint(std::span<const ScoreTrace> traces);

// Throws ValidationError when any id appears in both sets.
void check_disjoint(std::span<const ScoreTrace> calibration, std::span<const ScoreTrace> evaluation);

struct EvalOptions {
  std::set<Token> tail_tokens;
  const Scorer* scorer = nullptr;  // set-size measurement needs an expanding scorer
  int max_len = 0;                 // 0 means the rule's max length
  DecodeLimits limits;
  int threads = 1;
};

// Threshold-rule methods: coverage from per-trace path records, set size by
// expansion on options.scorer when given.
EvalReport evaluate(const StepThresholds& rule, std::span<const ScoreTrace> eval, const EvalOptions& options,
                    std::vector<PathEvalRecord>* records = nullptr);

// Fixed-set methods: a trace is covered iff its full sequence is in `members`.
EvalReport evaluate_set(std::span<const std::vector<Token>> members, std::span<const ScoreTrace> eval,
                        const EvalOptions& options);

// A constant threshold on sequence scores: split conformal prediction over
// full sequences. Equivalent to the set {s : score(s) >= q} whenever scores
// never increase along a prefix.
StepThresholds split_rule(double threshold, int max_len);

struct ExperimentResult {
  EvalReport report;
  std::optional<DcbsCalibration> dcbs;
  std::optional<CalibratedModel> cover;
  std::optional<BeamSubgroupCalibration> beam;
  std::optional<double> split_threshold;
};

struct ExperimentData {
  TabularARModel model;
  std::vector<ScoreTrace> calibration;
  std::vector<ScoreTrace> eval;
};

// The long-tail model with calibration and evaluation sets drawn from
// independent streams of config.seed.
ExperimentData make_experiment_data(const ExperimentConfig& config);

// Builds the long-tail model, samples disjoint calibration and evaluation
// sets from independent streams, calibrates and evaluates one method.
ExperimentResult run_experiment(const ExperimentConfig& config);

// Same on caller-provided data.
ExperimentResult run_method(const ExperimentConfig& config, const TabularARModel& model,
                            std::span<const ScoreTrace> calibration, std::span<const ScoreTrace> eval);

struct Comparison {
  std::vector<EvalReport> reports;
  nlohmann::json to_json(bool include_runtime = true) const;
};

// Side by side with deltas against the first report. Throws ValidationError
// when the reports were computed on different evaluation sets.
Comparison compare(std::span<const EvalReport> reports);

enum class ReportFormat { Json, Csv };
ReportFormat parse_report_format(const std::string& name);

// JSON: keys sorted, two-space indent, round-trip doubles. CSV: a header, one
// row per (l, m) cell and a final summary row.
std::string render_report(const EvalReport& report, ReportFormat format);
void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

}  // namespace cover
