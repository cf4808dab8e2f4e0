#include "cover/conformal_set.hpp"

#include <algorithm>
#include <cmath>

#include "cover/error.hpp"

namespace cover {

std::string cluster_name(ClusterId m) {
  return m == kNullCluster ? std::string("null") : std::to_string(m);
}

ClusterId parse_cluster_name(const std::string& name) {
  if (name == "null") return kNullCluster;
  try {
    std::size_t used = 0;
    const int m = std::stoi(name, &used);
    if (used == name.size() && m >= 1) return m;
  } catch (const std::exception&) {
  }
  throw ValidationError("invalid cluster id '" + name + "'");
}

ClusterAssignment ClusterAssignment::all_null(int max_len) {
  ClusterAssignment a;
  a.clusters = 0;
  a.bucket_width = std::max(max_len, 1);
  a.max_len = max_len;
  a.buckets.resize(1);
  return a;
}

int ClusterAssignment::bucket_of(int step) const {
  if (step < 1) throw ValidationError("step must be >= 1");
  return (step - 1) / bucket_width;
}

ClusterId ClusterAssignment::cluster_of(int step, Token token) const {
  const int b = bucket_of(step);
  if (b >= bucket_count()) return kNullCluster;
  const auto& map = buckets[static_cast<std::size_t>(b)];
  auto it = map.find(token);
  return it == map.end() ? kNullCluster : it->second;
}

nlohmann::json ClusterAssignment::to_json() const {
  nlohmann::json doc = nlohmann::json::object();
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    nlohmann::json bucket = nlohmann::json::object();
    for (const auto& [token, m] : buckets[b]) bucket[std::to_string(token)] = cluster_name(m);
    doc[std::to_string(b + 1)] = std::move(bucket);
  }
  return doc;
}

ClusterAssignment ClusterAssignment::from_json(const nlohmann::json& doc, int clusters,
                                               int bucket_width, int max_len) {
  ClusterAssignment a;
  a.clusters = clusters;
  a.bucket_width = bucket_width;
  a.max_len = max_len;
  if (bucket_width < 1) throw ValidationError("assignment: bucket_width must be >= 1");
  a.buckets.resize(static_cast<std::size_t>(std::max(1, (max_len + bucket_width - 1) / bucket_width)));
  for (const auto& [key, bucket] : doc.items()) {
    const int b = std::stoi(key) - 1;
    if (b < 0 || b >= a.bucket_count()) throw ValidationError("assignment: bucket " + key + " out of range");
    for (const auto& [token, m] : bucket.items()) {
      const ClusterId id = m.is_string() ? parse_cluster_name(m.get<std::string>()) : m.get<int>();
      if (id > clusters) throw ValidationError("assignment: cluster id exceeds M");
      a.buckets[static_cast<std::size_t>(b)][std::stoi(token)] = id;
    }
  }
  return a;
}

double scale_score(ScoreScale scale, double raw) {
  return scale == ScoreScale::Log ? std::log(raw) : raw;
}

std::string to_string(ScoreScale scale) { return scale == ScoreScale::Log ? "log" : "raw"; }

ScoreScale parse_score_scale(const std::string& name) {
  if (name == "log") return ScoreScale::Log;
  if (name == "raw") return ScoreScale::Raw;
  throw ValidationError("unknown score scale '" + name + "'");
}

double StepThresholds::threshold(int step, ClusterId m) const {
  if (step < 1 || step > max_len()) return kInfinity;
  const auto& row = table[static_cast<std::size_t>(step - 1)];
  if (m < 0 || static_cast<std::size_t>(m) >= row.size()) return kInfinity;
  return row[static_cast<std::size_t>(m)];
}

bool StepThresholds::admits(int step, Token token, double raw_score) const {
  return scale_score(scale, raw_score) >= threshold(step, cluster_of(step, token));
}

PathEvalRecord evaluate_path(const ScoreTrace& trace, const StepThresholds& rule) {
  PathEvalRecord rec;
  rec.trace_id = trace.id;
  rec.steps.reserve(trace.length());
  for (std::size_t i = 0; i < trace.length(); ++i) {
    const int step = static_cast<int>(i) + 1;
    StepCheck check;
    check.step = step;
    check.cluster = rule.cluster_of(step, trace.tokens[i]);
    check.score = scale_score(rule.scale, trace.prefix_scores[i]);
    check.threshold = rule.threshold(step, check.cluster);
    check.passed = rec.covered && check.score >= check.threshold;
    if (rec.covered && !check.passed) {
      rec.covered = false;
      rec.first_failure = std::make_pair(step, check.cluster);
    }
    rec.steps.push_back(check);
  }
  return rec;
}

DecodeResult conformal_expand(const Scorer& scorer, const StepThresholds& rule, int max_len,
                              const DecodeLimits& limits) {
  if (!scorer.supports_expansion()) throw UnsupportedOperation("conformal_expand: scorer cannot expand");
  if (max_len < 1) throw ValidationError("conformal_expand: max_len must be >= 1");
  max_len = std::min(max_len, scorer.max_len());
  const auto term = scorer.terminator();
  const auto vocab = static_cast<std::size_t>(scorer.vocab_size());

  DecodeResult result;
  std::vector<std::vector<Token>> frontier{{}};
  std::vector<std::pair<std::vector<Token>, double>> done;
  for (int step = 1; step <= max_len && !frontier.empty(); ++step) {
    std::vector<std::vector<Token>> next;
    std::size_t admitted = 0;
    for (const auto& prefix : frontier) {
      const auto scores = scorer.next_token_scores(prefix);
      for (std::size_t a = 0; a < vocab; ++a) {
        const auto token = static_cast<Token>(a);
        if (!rule.admits(step, token, scores[a])) continue;
        if (++result.expanded_nodes > limits.max_nodes) {
          throw CapacityError("conformal expansion exceeded " + std::to_string(limits.max_nodes) + " nodes");
        }
        ++admitted;
        auto grown = prefix;
        grown.push_back(token);
        if ((term && token == *term) || step == max_len) {
          done.emplace_back(std::move(grown), scores[a]);
        } else {
          next.push_back(std::move(grown));
        }
      }
    }
    result.admitted_per_step.push_back(admitted);
    frontier = std::move(next);
  }
  std::sort(done.begin(), done.end());
  result.sequences.reserve(done.size());
  result.scores.reserve(done.size());
  for (auto& [seq, score] : done) {
    result.sequences.push_back(std::move(seq));
    result.scores.push_back(score);
  }
  return result;
}

}  // namespace cover
