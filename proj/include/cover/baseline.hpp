#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cover/conformal_set.hpp"
#include "cover/scorer.hpp"
#include "cover/trace.hpp"

namespace cover {

// Split conformal threshold: quantile((N + 1) alpha / N, scores) with N = |scores|.
// The prediction set keeps every label whose score is >= the threshold.
double split_cp_calibrate(std::span<const double> scores, double alpha);

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct BeamCandidate {
  std::vector<Token> tokens;
  double score = 0.0;      // scorer's sequence score
  double log_score = 0.0;  // log(score), the usual beam accumulator
  bool finished = false;

  friend bool operator==(const BeamCandidate&, const BeamCandidate&) = default;
};

// At most `width` candidates, sorted by score descending; equal scores are
// ordered lexicographically, so the lower token id wins ties.
struct BeamSet {
  std::vector<BeamCandidate> candidates;
  int width = 0;

  bool contains(std::span<const Token> sequence) const;
};

// Standard beam search: expand every unfinished candidate by each token,
// freeze candidates that emit the terminator or reach max_len, keep the top
// `width`. Zero-score continuations are never proposed.
BeamSet beam_search(const Scorer& scorer, int width, int max_len);

// Split CP restricted to the in-beam subgroup B = {i : s_i in beam}.
struct BeamSubgroupCalibration {
  double alpha = 0.0;
  double threshold = kInfinity;
  std::size_t in_beam_count = 0;   // |B|
  std::size_t excluded_count = 0;  // calibration points outside the beam
  bool empty_subgroup = true;
  BeamSet beam;
};

BeamSubgroupCalibration beam_subgroup_calibrate(std::span<const ScoreTrace> traces,
                                                const Scorer& scorer, int width, double alpha);

// Beam members whose full-sequence score clears the threshold.
std::vector<std::vector<Token>> beam_subgroup_decode(const BeamSubgroupCalibration& calib);

// ---------------------------------------------------------------------------
// Dynamic conformal beam search
// ---------------------------------------------------------------------------

struct DcbsCalibration {
  double alpha = 0.0;
  int max_len = 0;
  std::vector<double> thresholds;             // Q_1..Q_L, raw scale
  std::vector<std::size_t> removed;           // k_l
  std::vector<std::size_t> active_counts;     // survivors still running at step l
  std::vector<std::size_t> surviving_counts;  // N_0..N_L
  std::vector<std::string> warnings;

  // Every token is in the null cluster with the step threshold Q_l.
  StepThresholds rule() const;

  nlohmann::json to_json() const;
  static DcbsCalibration from_json(const nlohmann::json& doc);
};

// Iterative calibration: at step l take the survivors still running,
// k = floor((n + 1) alpha), Q_l = k-th smallest length-l score (clamped to
// the minimum when k = 0), and drop the k lowest-ranked survivors. Ties are
// ranked by position in `traces`. Steps with no survivors get +infinity.
DcbsCalibration dcbs_calibrate(std::span<const ScoreTrace> traces, double alpha, int max_len);

DecodeResult dcbs_decode(const Scorer& scorer, const DcbsCalibration& calib, int max_len,
                         const DecodeLimits& limits = {});

}  // namespace cover
