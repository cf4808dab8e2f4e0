#include "cover/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cover/error.hpp"

namespace cover {

namespace {

void check_alpha(double alpha, const char* where) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError(std::string(where) + ": alpha must lie in (0, 1)");
}

bool beam_before(const BeamCandidate& a, const BeamCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

double split_cp_calibrate(std::span<const double> scores, double alpha) {
  check_alpha(alpha, "split_cp_calibrate");
  if (scores.empty()) throw ValidationError("split_cp_calibrate: no calibration scores");
  const double n = static_cast<double>(scores.size());
  return quantile((n + 1.0) * alpha / n, scores);
}

bool BeamSet::contains(std::span<const Token> sequence) const {
  return std::any_of(candidates.begin(), candidates.end(), [&](const BeamCandidate& c) {
    return std::equal(c.tokens.begin(), c.tokens.end(), sequence.begin(), sequence.end());
  });
}

BeamSet beam_search(const Scorer& scorer, int width, int max_len) {
  if (width < 1) throw ValidationError("beam_search: width must be >= 1");
  if (!scorer.supports_expansion()) throw UnsupportedOperation("beam_search: scorer cannot expand");
  max_len = std::min(max_len, scorer.max_len());
  const auto term = scorer.terminator();

  std::vector<BeamCandidate> beam{BeamCandidate{}};
  for (int step = 1; step <= max_len; ++step) {
    if (std::all_of(beam.begin(), beam.end(), [](const BeamCandidate& c) { return c.finished; })) break;
    std::vector<BeamCandidate> pool;
    for (const auto& cand : beam) {
      if (cand.finished) {
        pool.push_back(cand);
        continue;
      }
      const auto scores = scorer.next_token_scores(cand.tokens);
      for (std::size_t a = 0; a < scores.size(); ++a) {
        if (!(scores[a] > 0.0)) continue;
        BeamCandidate next;
        next.tokens = cand.tokens;
        next.tokens.push_back(static_cast<Token>(a));
        next.score = scores[a];
        next.log_score = std::log(scores[a]);
        next.finished = (term && static_cast<Token>(a) == *term) || step == max_len;
        pool.push_back(std::move(next));
      }
    }
    const auto keep = std::min(pool.size(), static_cast<std::size_t>(width));
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), beam_before);
    pool.resize(keep);
    beam = std::move(pool);
  }
  // The empty root survives only when max_len < 1; drop it.
  std::erase_if(beam, [](const BeamCandidate& c) { return c.tokens.empty(); });
  return BeamSet{std::move(beam), width};
}

BeamSubgroupCalibration beam_subgroup_calibrate(std::span<const ScoreTrace> traces,
                                                const Scorer& scorer, int width, double alpha) {
  check_alpha(alpha, "beam_subgroup_calibrate");
  BeamSubgroupCalibration calib;
  calib.alpha = alpha;
  calib.beam = beam_search(scorer, width, scorer.max_len());
  std::vector<double> scores;
  for (const auto& t : traces) {
    if (!t.tokens.empty() && calib.beam.contains(t.tokens)) scores.push_back(t.prefix_scores.back());
  }
  calib.in_beam_count = scores.size();
  calib.excluded_count = traces.size() - scores.size();
  calib.empty_subgroup = scores.empty();
  calib.threshold = scores.empty() ? kInfinity : split_cp_calibrate(scores, alpha);
  return calib;
}

std::vector<std::vector<Token>> beam_subgroup_decode(const BeamSubgroupCalibration& calib) {
  std::vector<std::vector<Token>> out;
  for (const auto& c : calib.beam.candidates) {
    if (c.score >= calib.threshold) out.push_back(c.tokens);
  }
  std::sort(out.begin(), out.end());
  return out;
}

DcbsCalibration dcbs_calibrate(std::span<const ScoreTrace> traces, double alpha, int max_len) {
  check_alpha(alpha, "dcbs_calibrate");
  if (max_len < 1) throw ValidationError("dcbs_calibrate: max_len must be >= 1");
  DcbsCalibration calib;
  calib.alpha = alpha;
  calib.max_len = max_len;
  calib.surviving_counts.push_back(traces.size());

  std::vector<std::size_t> survivors(traces.size());
  std::iota(survivors.begin(), survivors.end(), std::size_t{0});
  for (int step = 1; step <= max_len; ++step) {
    const auto idx = static_cast<std::size_t>(step - 1);
    std::vector<std::size_t> active;
    for (std::size_t i : survivors) {
      if (traces[i].length() >= static_cast<std::size_t>(step)) active.push_back(i);
    }
    const std::size_t n = active.size();
    calib.active_counts.push_back(n);
    if (n == 0) {
      calib.thresholds.push_back(kInfinity);
      calib.removed.push_back(0);
      calib.surviving_counts.push_back(0);
      calib.warnings.push_back("step " + std::to_string(step) + ": no surviving calibration traces");
      survivors.clear();
      continue;
    }
    std::stable_sort(active.begin(), active.end(), [&](std::size_t a, std::size_t b) {
      return traces[a].prefix_scores[idx] < traces[b].prefix_scores[idx];
    });
    const auto k = static_cast<std::size_t>(std::floor((static_cast<double>(n) + 1.0) * alpha));
    const std::size_t kk = std::min(k, n);
    calib.thresholds.push_back(traces[active[std::max<std::size_t>(kk, 1) - 1]].prefix_scores[idx]);
    calib.removed.push_back(kk);
    calib.surviving_counts.push_back(n - kk);
    survivors.assign(active.begin() + static_cast<std::ptrdiff_t>(kk), active.end());
    std::sort(survivors.begin(), survivors.end());
  }
  return calib;
}

StepThresholds DcbsCalibration::rule() const {
  StepThresholds rule;
  rule.scale = ScoreScale::Raw;
  rule.assignment = ClusterAssignment::all_null(max_len);
  for (double q : thresholds) rule.table.push_back({q});
  return rule;
}

DecodeResult dcbs_decode(const Scorer& scorer, const DcbsCalibration& calib, int max_len,
                         const DecodeLimits& limits) {
  return conformal_expand(scorer, calib.rule(), max_len, limits);
}

nlohmann::json DcbsCalibration::to_json() const {
  nlohmann::json q = nlohmann::json::array();
  for (double t : thresholds) q.push_back(encode_double(t));
  return {{"kind", "dcbs"},
          {"alpha", alpha},
          {"max_len", max_len},
          {"score_scale", "raw"},
          {"thresholds", q},
          {"removed", removed},
          {"active_counts", active_counts},
          {"surviving_counts", surviving_counts},
          {"warnings", warnings}};
}

DcbsCalibration DcbsCalibration::from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("kind", std::string()) != "dcbs") throw ValidationError("not a dcbs calibration document");
    DcbsCalibration c;
    c.alpha = doc.at("alpha").get<double>();
    c.max_len = doc.at("max_len").get<int>();
    for (const auto& q : doc.at("thresholds")) c.thresholds.push_back(decode_double(q));
    c.removed = doc.at("removed").get<std::vector<std::size_t>>();
    c.active_counts = doc.at("active_counts").get<std::vector<std::size_t>>();
    c.surviving_counts = doc.at("surviving_counts").get<std::vector<std::size_t>>();
    c.warnings = doc.value("warnings", std::vector<std::string>{});
    if (static_cast<int>(c.thresholds.size()) != c.max_len) {
      throw ValidationError("dcbs calibration: threshold count does not match max_len");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("dcbs calibration document: ") + e.what());
  }
}

}  // namespace cover
