#include "cover/cover.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cover/error.hpp"
#include "cover/rng.hpp"

namespace cover {

// ---------------------------------------------------------------------------
// BetaMatrix / LambdaTable
// ---------------------------------------------------------------------------

BetaMatrix::BetaMatrix(int clusters, int buckets, double fill) : clusters_(clusters), buckets_(buckets) {
  if (clusters < 0 || buckets < 1) throw ValidationError("beta matrix: invalid shape");
  if (!(fill >= 0.0 && fill <= 1.0)) throw ValidationError("beta matrix: entries must lie in [0, 1]");
  values_.assign(static_cast<std::size_t>(clusters + 1) * static_cast<std::size_t>(buckets), fill);
}

std::size_t BetaMatrix::offset(ClusterId m, int bucket) const {
  if (m < 0 || m > clusters_ || bucket < 0 || bucket >= buckets_) {
    throw ValidationError("beta matrix: (" + cluster_name(m) + ", bucket " + std::to_string(bucket + 1) +
                          ") out of range");
  }
  return static_cast<std::size_t>(m) * static_cast<std::size_t>(buckets_) + static_cast<std::size_t>(bucket);
}

double BetaMatrix::at(ClusterId m, int bucket) const { return values_[offset(m, bucket)]; }

void BetaMatrix::set(ClusterId m, int bucket, double value) {
  if (!(value >= 0.0 && value <= 1.0)) throw ValidationError("beta matrix: entries must lie in [0, 1]");
  values_[offset(m, bucket)] = value;
}

nlohmann::json BetaMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int m = 0; m <= clusters_; ++m) {
    nlohmann::json row = nlohmann::json::array();
    for (int b = 0; b < buckets_; ++b) row.push_back(at(m, b));
    rows.push_back(std::move(row));
  }
  return rows;
}

BetaMatrix BetaMatrix::from_json(const nlohmann::json& doc) {
  if (!doc.is_array() || doc.empty() || !doc[0].is_array() || doc[0].empty()) {
    throw ValidationError("beta matrix: expected a non-empty array of rows");
  }
  BetaMatrix beta(static_cast<int>(doc.size()) - 1, static_cast<int>(doc[0].size()));
  for (std::size_t m = 0; m < doc.size(); ++m) {
    if (doc[m].size() != doc[0].size()) throw ValidationError("beta matrix: ragged rows");
    for (std::size_t b = 0; b < doc[m].size(); ++b) {
      beta.set(static_cast<ClusterId>(m), static_cast<int>(b), doc[m][b].get<double>());
    }
  }
  return beta;
}

double LambdaTable::at(int step, ClusterId m) const {
  auto it = overrides.find({step, m});
  return it == overrides.end() ? uniform : it->second;
}

nlohmann::json LambdaTable::to_json() const {
  nlohmann::json pairs = nlohmann::json::object();
  for (const auto& [key, v] : overrides) pairs[pair_key(key.first, key.second)] = v;
  return {{"uniform", uniform}, {"pairs", pairs}};
}

LambdaTable LambdaTable::from_json(const nlohmann::json& doc) {
  LambdaTable t;
  if (doc.is_number()) {
    t.uniform = doc.get<double>();
    return t;
  }
  t.uniform = doc.at("uniform").get<double>();
  if (doc.contains("pairs")) {
    for (const auto& [key, v] : doc["pairs"].items()) t.overrides[parse_pair_key(key)] = v.get<double>();
  }
  return t;
}

std::string pair_key(int step, ClusterId m) { return std::to_string(step) + ":" + cluster_name(m); }

std::pair<int, ClusterId> parse_pair_key(const std::string& key) {
  const auto colon = key.find(':');
  if (colon == std::string::npos) throw ValidationError("invalid pair key '" + key + "'");
  try {
    std::size_t used = 0;
    const int step = std::stoi(key.substr(0, colon), &used);
    if (used != colon || step < 1) throw ValidationError("invalid pair key '" + key + "'");
    return {step, parse_cluster_name(key.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw ValidationError("invalid pair key '" + key + "'");
  }
}

// ---------------------------------------------------------------------------
// Reference route
// ---------------------------------------------------------------------------

namespace {

std::vector<double> index_scores(int step, ClusterId m, std::span<const ScoreTrace> d2,
                                 const ClusterAssignment& assignment, ScoreScale scale) {
  std::vector<double> scores;
  const auto i = static_cast<std::size_t>(step - 1);
  for (const auto& t : d2) {
    if (t.length() < static_cast<std::size_t>(step)) continue;
    if (m == kNullCluster || assignment.cluster_of(step, t.tokens[i]) == m) {
      scores.push_back(scale_score(scale, t.prefix_scores[i]));
    }
  }
  return scores;
}

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
}

}  // namespace

double cluster_quantile(const BetaMatrix& beta, int step, ClusterId m, std::span<const ScoreTrace> d2,
                        const ClusterAssignment& assignment, ScoreScale scale) {
  if (step < 1) throw ValidationError("cluster_quantile: step must be >= 1");
  const auto scores = index_scores(step, m, d2, assignment, scale);
  return quantile(beta.at(m, assignment.bucket_of(step)), scores);
}

StepThresholds cover_thresholds(const BetaMatrix& beta, std::span<const ScoreTrace> d2,
                                const ClusterAssignment& assignment, ScoreScale scale) {
  if (beta.clusters() != assignment.clusters || beta.buckets() != assignment.bucket_count()) {
    throw ValidationError("cover_thresholds: beta shape does not match the assignment");
  }
  StepThresholds rule;
  rule.scale = scale;
  rule.assignment = assignment;
  for (int l = 1; l <= assignment.max_len; ++l) {
    std::vector<double> row;
    for (ClusterId m = 0; m <= assignment.clusters; ++m) {
      row.push_back(cluster_quantile(beta, l, m, d2, assignment, scale));
    }
    rule.table.push_back(std::move(row));
  }
  return rule;
}

PathEvalRecord coverage_indicator(const ScoreTrace& trace, const StepThresholds& rule) {
  return evaluate_path(trace, rule);
}

ClusterError empirical_cluster_error(int step, ClusterId m, const StepThresholds& rule,
                                     std::span<const ScoreTrace> d2) {
  ClusterError e;
  const auto idx = static_cast<std::size_t>(step - 1);
  for (const auto& t : d2) {
    if (t.length() < static_cast<std::size_t>(step)) continue;
    if (rule.cluster_of(step, t.tokens[idx]) != m) continue;
    bool alive = true;
    for (int k = 1; k < step && alive; ++k) {
      const auto ki = static_cast<std::size_t>(k - 1);
      alive = rule.admits(k, t.tokens[ki], t.prefix_scores[ki]);
    }
    if (!alive) continue;
    ++e.survivors;
    if (!rule.admits(step, t.tokens[idx], t.prefix_scores[idx])) ++e.failures;
  }
  e.value = e.survivors == 0 ? 0.0 : static_cast<double>(e.failures) / static_cast<double>(e.survivors);
  return e;
}

ObjectiveValue objective(const BetaMatrix& beta, std::span<const ScoreTrace> d2,
                         const ClusterAssignment& assignment, const LambdaTable& lambda, ScoreScale scale) {
  const auto rule = cover_thresholds(beta, d2, assignment, scale);
  ObjectiveValue out;
  out.total = d2.size();
  for (const auto& t : d2) {
    if (coverage_indicator(t, rule).covered) ++out.covered;
  }
  for (int l = 1; l <= assignment.max_len; ++l) {
    for (ClusterId m = 0; m <= assignment.clusters; ++m) {
      if (index_scores(l, m, d2, assignment, scale).empty()) continue;
      const auto err = empirical_cluster_error(l, m, rule, d2);
      out.value += rule.threshold(l, m) - lambda.at(l, m) * err.value;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CalibrationIndex
// ---------------------------------------------------------------------------

CalibrationIndex::CalibrationIndex(std::span<const ScoreTrace> d2, const ClusterAssignment& assignment,
                                   ScoreScale scale)
    : assignment_(assignment), max_len_(assignment.max_len) {
  const auto L = static_cast<std::size_t>(max_len_);
  const auto M1 = static_cast<std::size_t>(assignment.clusters + 1);
  sorted_.assign(L, std::vector<std::vector<double>>(M1));
  members_.assign(M1, std::vector<std::size_t>(static_cast<std::size_t>(assignment.bucket_count()), 0));
  std::vector<std::vector<double>> scaled(d2.size());
  steps_.resize(d2.size());
  for (std::size_t i = 0; i < d2.size(); ++i) {
    const auto& t = d2[i];
    if (t.length() > L) {
      throw ValidationError("trace " + t.id + " is longer than max_len " + std::to_string(max_len_));
    }
    for (std::size_t s = 0; s < t.length(); ++s) {
      const int step = static_cast<int>(s) + 1;
      const ClusterId c = assignment.cluster_of(step, t.tokens[s]);
      if (c < 0 || c > assignment.clusters) throw ValidationError("cluster id out of range");
      const double v = scale_score(scale, t.prefix_scores[s]);
      scaled[i].push_back(v);
      sorted_[s][static_cast<std::size_t>(c)].push_back(v);
      if (c != kNullCluster) sorted_[s][0].push_back(v);
      ++members_[static_cast<std::size_t>(c)][static_cast<std::size_t>(assignment.bucket_of(step))];
      steps_[i].push_back({c, 0});
    }
  }
  for (auto& row : sorted_) {
    for (auto& v : row) std::sort(v.begin(), v.end());
  }
  for (std::size_t i = 0; i < d2.size(); ++i) {
    for (std::size_t s = 0; s < steps_[i].size(); ++s) {
      const auto& v = sorted_[s][static_cast<std::size_t>(steps_[i][s].cluster)];
      steps_[i][s].rank = static_cast<std::uint32_t>(std::upper_bound(v.begin(), v.end(), scaled[i][s]) - v.begin());
    }
  }
}

std::size_t CalibrationIndex::index_size(int step, ClusterId m) const {
  if (step < 1 || step > max_len_ || m < 0 || m > clusters()) return 0;
  return sorted_[static_cast<std::size_t>(step - 1)][static_cast<std::size_t>(m)].size();
}

std::size_t CalibrationIndex::bucket_members(ClusterId m, int bucket) const {
  return members_.at(static_cast<std::size_t>(m)).at(static_cast<std::size_t>(bucket));
}

double CalibrationIndex::threshold(const BetaMatrix& beta, int step, ClusterId m) const {
  const std::size_t n = index_size(step, m);
  if (n == 0) return kInfinity;
  const auto k = order_index(n, beta.at(m, assignment_.bucket_of(step)));
  return sorted_[static_cast<std::size_t>(step - 1)][static_cast<std::size_t>(m)][k - 1];
}

std::vector<std::vector<std::size_t>> CalibrationIndex::order_table(const BetaMatrix& beta) const {
  if (beta.clusters() != clusters() || beta.buckets() != buckets()) {
    throw ValidationError("beta shape does not match the calibration index");
  }
  std::vector<std::vector<std::size_t>> k(static_cast<std::size_t>(max_len_));
  for (int l = 1; l <= max_len_; ++l) {
    for (ClusterId m = 0; m <= clusters(); ++m) {
      const std::size_t n = index_size(l, m);
      k[static_cast<std::size_t>(l - 1)].push_back(
          n == 0 ? std::numeric_limits<std::size_t>::max() : order_index(n, beta.at(m, assignment_.bucket_of(l))));
    }
  }
  return k;
}

std::size_t CalibrationIndex::covered_count(const BetaMatrix& beta) const {
  const auto k = order_table(beta);
  std::size_t covered = 0;
  for (const auto& cells : steps_) {
    bool ok = true;
    for (std::size_t s = 0; s < cells.size() && ok; ++s) {
      ok = cells[s].rank >= k[s][static_cast<std::size_t>(cells[s].cluster)];
    }
    if (ok) ++covered;
  }
  return covered;
}

ObjectiveValue CalibrationIndex::objective(const BetaMatrix& beta, const LambdaTable& lambda) const {
  const auto k = order_table(beta);
  const auto L = static_cast<std::size_t>(max_len_);
  const auto M1 = static_cast<std::size_t>(clusters() + 1);
  std::vector<std::vector<std::size_t>> survivors(L, std::vector<std::size_t>(M1, 0));
  auto failures = survivors;
  ObjectiveValue out;
  out.total = steps_.size();
  for (const auto& cells : steps_) {
    bool ok = true;
    for (std::size_t s = 0; s < cells.size(); ++s) {
      const auto c = static_cast<std::size_t>(cells[s].cluster);
      ++survivors[s][c];
      if (cells[s].rank < k[s][c]) {
        ++failures[s][c];
        ok = false;
        break;
      }
    }
    if (ok) ++out.covered;
  }
  for (std::size_t s = 0; s < L; ++s) {
    for (std::size_t m = 0; m < M1; ++m) {
      const auto& v = sorted_[s][m];
      if (v.empty()) continue;
      const double eps = survivors[s][m] == 0
                             ? 0.0
                             : static_cast<double>(failures[s][m]) / static_cast<double>(survivors[s][m]);
      out.value += v[k[s][m] - 1] - lambda.at(static_cast<int>(s) + 1, static_cast<ClusterId>(m)) * eps;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

std::string to_string(TradeoffRule rule) { return rule == TradeoffRule::RaiseOnly ? "raise-only" : "exchange"; }

TradeoffRule parse_tradeoff_rule(const std::string& name) {
  if (name == "raise-only") return TradeoffRule::RaiseOnly;
  if (name == "exchange") return TradeoffRule::Exchange;
  throw ValidationError("unknown trade-off rule '" + name + "'");
}

std::size_t required_count(std::size_t n, double alpha) {
  return static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(n) - 1e-9));
}

std::size_t strict_count(std::size_t n, double alpha) {
  return static_cast<std::size_t>(std::floor((1.0 - alpha) * static_cast<double>(n) + 1e-9)) + 1;
}

std::size_t phase1_count(std::size_t n, double alpha) {
  return static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(n) + 1.0 - 1e-9));
}

namespace {

// Smallest j in [lo, hi] with pred(j) true, or hi + 1; pred must be monotone.
template <typename Pred>
std::size_t first_true(std::size_t lo, std::size_t hi, Pred pred) {
  std::size_t a = lo;
  std::size_t b = hi + 1;
  while (a < b) {
    const std::size_t mid = a + (b - a) / 2;
    if (pred(mid)) {
      b = mid;
    } else {
      a = mid + 1;
    }
  }
  return a;
}

double grid_up(double base, std::size_t j, double eps) { return std::min(1.0, base + static_cast<double>(j) * eps); }
double grid_down(double base, std::size_t j, double eps) { return std::max(0.0, base - static_cast<double>(j) * eps); }

// Lowers `coord` by the fewest grid steps that uncover at least one more
// trace. Leaves beta unchanged when no decrement helps.
void release_coordinate(const CalibrationIndex& index, BetaMatrix& beta, std::pair<ClusterId, int> coord,
                        double eps) {
  const double a = beta.at(coord.first, coord.second);
  if (a <= 0.0) return;
  const std::size_t base = index.covered_count(beta);
  const auto dmax = static_cast<std::size_t>(std::ceil(a / eps - 1e-9));
  BetaMatrix probe = beta;
  const auto d = first_true(1, dmax, [&](std::size_t j) {
    probe.set(coord.first, coord.second, grid_down(a, j, eps));
    return index.covered_count(probe) > base;
  });
  if (d <= dmax) beta.set(coord.first, coord.second, grid_down(a, d, eps));
}

// Raises (m, b) on the grid while coverage stays strictly above 1 - alpha,
// stopping at the first point where it reaches exactly 1 - alpha.
void raise_coordinate(const CalibrationIndex& index, BetaMatrix& beta, std::pair<ClusterId, int> coord, double eps,
                      std::size_t need, std::size_t strict) {
  const double b0 = beta.at(coord.first, coord.second);
  const auto jmax = static_cast<std::size_t>(std::floor((1.0 - b0) / eps + 1e-9));
  BetaMatrix probe = beta;
  auto count = [&](std::size_t j) {
    probe.set(coord.first, coord.second, grid_up(b0, j, eps));
    return index.covered_count(probe);
  };
  const std::size_t j1 = first_true(0, jmax, [&](std::size_t j) { return count(j) < strict; });
  std::size_t j = jmax;
  if (j1 <= jmax) j = count(j1) >= need ? j1 : (j1 == 0 ? 0 : j1 - 1);
  beta.set(coord.first, coord.second, grid_up(b0, j, eps));
}

}  // namespace

OptimizeResult optimize(const CalibrationIndex& index, const OptimizeOptions& options) {
  check_alpha(options.alpha);
  const std::size_t n = index.size();
  if (n == 0) throw ValidationError("optimize: empty calibration set");
  OptimizeResult out;
  out.epsilon = options.epsilon > 0.0 ? options.epsilon : 1.0 / static_cast<double>(n);
  if (!(out.epsilon <= 1.0)) throw ValidationError("optimize: epsilon must lie in (0, 1]");
  out.need = required_count(n, options.alpha);
  const std::size_t strict = strict_count(n, options.alpha);
  const std::size_t need1 = phase1_count(n, options.alpha);

  if (options.anchor) {
    out.anchor = *options.anchor;
  } else {
    std::size_t best = 0;
    bool found = false;
    for (int b = 0; b < index.buckets(); ++b) {
      for (ClusterId m = 0; m <= index.clusters(); ++m) {
        const auto c = index.bucket_members(m, b);
        if (!found || c > best) {
          best = c;
          out.anchor = {m, b};
          found = true;
        }
      }
    }
  }
  const auto [am, ab] = out.anchor;
  if (am < 0 || am > index.clusters() || ab < 0 || ab >= index.buckets()) {
    throw ValidationError("optimize: anchor coordinate out of range");
  }

  // Phase 1.
  BetaMatrix beta(index.clusters(), index.buckets());
  auto anchor_at = [&](std::size_t t) { return static_cast<double>(n - t) / static_cast<double>(n); };
  BetaMatrix probe = beta;
  const std::size_t t = first_true(0, n, [&](std::size_t s) {
    probe.set(am, ab, anchor_at(s));
    return index.covered_count(probe) >= need1;
  });
  if (t > n) {
    throw InfeasibleError("optimize: coverage 1 - alpha + 1/|I_2| is unreachable with " + std::to_string(n) +
                          " calibration traces at alpha " + std::to_string(options.alpha));
  }
  beta.set(am, ab, anchor_at(t));
  out.phase1_beta = beta;
  out.phase1 = index.objective(beta, options.lambda);

  // Phase 2.
  std::vector<std::pair<ClusterId, int>> coords;
  for (int b = 0; b < index.buckets(); ++b) {
    for (ClusterId m = 0; m <= index.clusters(); ++m) {
      if (std::make_pair(m, b) != out.anchor && index.bucket_members(m, b) > 0) coords.emplace_back(m, b);
    }
  }
  ObjectiveValue current = out.phase1;
  if (coords.empty() && options.budget > 0) out.warnings.push_back("no coordinate besides the anchor has data");
  Rng rng(derive_seed(options.seed, 0x7a11));
  for (std::size_t it = 0; it < options.budget && !coords.empty(); ++it) {
    const auto coord = coords[uniform_index(rng, coords.size())];
    BetaMatrix cand = beta;
    if (options.tradeoff == TradeoffRule::Exchange) release_coordinate(index, cand, out.anchor, out.epsilon);
    raise_coordinate(index, cand, coord, out.epsilon, out.need, strict);
    auto value = index.objective(cand, options.lambda);
    if (options.tradeoff == TradeoffRule::Exchange) {
      BetaMatrix back = beta;
      release_coordinate(index, back, coord, out.epsilon);
      raise_coordinate(index, back, out.anchor, out.epsilon, out.need, strict);
      const auto back_value = index.objective(back, options.lambda);
      if (back_value.value > value.value) {
        cand = std::move(back);
        value = back_value;
      }
    }
    AuditEntry entry;
    entry.iteration = it;
    entry.cluster = coord.first;
    entry.bucket = coord.second;
    entry.candidate = cand;
    entry.covered_before = current.covered;
    entry.covered_after = value.covered;
    entry.objective_before = current.value;
    entry.objective_after = value.value;
    entry.accepted = value.value > current.value && value.covered >= out.need;
    if (entry.accepted) {
      beta = cand;
      current = value;
      ++out.accepted;
    }
    out.audit.push_back(std::move(entry));
  }
  out.beta = beta;
  out.final_value = current;
  if (current.covered < out.need) throw Error("optimize: returned beta violates the coverage constraint");
  return out;
}

AuditReplay replay_audit(const OptimizeResult& result, std::span<const ScoreTrace> d2,
                         const ClusterAssignment& assignment, const OptimizeOptions& options, ScoreScale scale) {
  AuditReplay r;
  const std::size_t n = d2.size();
  const std::size_t need = required_count(n, options.alpha);
  auto fail = [&](const std::string& what) { r.violations.push_back(what); };

  auto current = objective(result.phase1_beta, d2, assignment, options.lambda, scale);
  ++r.checked;
  if (current.covered < phase1_count(n, options.alpha)) fail("phase 1: coverage below 1 - alpha + 1/n");
  if (current.covered < need) fail("phase 1: coverage constraint violated");
  if (current.value != result.phase1.value) fail("phase 1: logged objective differs from recomputation");
  BetaMatrix beta = result.phase1_beta;

  for (const auto& e : result.audit) {
    const std::string tag = "iteration " + std::to_string(e.iteration) + ": ";
    ++r.checked;
    if (e.objective_before != current.value) fail(tag + "objective_before does not match replayed state");
    if (e.covered_before != current.covered) fail(tag + "covered_before does not match replayed state");
    for (ClusterId m = 0; m <= beta.clusters(); ++m) {
      for (int b = 0; b < beta.buckets(); ++b) {
        const bool touched = (m == e.cluster && b == e.bucket) ||
                             (options.tradeoff == TradeoffRule::Exchange && std::make_pair(m, b) == result.anchor);
        if (!touched && e.candidate.at(m, b) != beta.at(m, b)) fail(tag + "candidate changed an untouched coordinate");
      }
    }
    const auto value = objective(e.candidate, d2, assignment, options.lambda, scale);
    if (value.value != e.objective_after) fail(tag + "objective_after differs from recomputation");
    if (value.covered != e.covered_after) fail(tag + "covered_after differs from recomputation");
    if (value.covered < need) fail(tag + "candidate violates the coverage constraint");
    const bool improves = value.value > current.value;
    if (e.accepted != improves) fail(tag + "acceptance decision disagrees with the objective");
    if (e.accepted) {
      if (value.value < current.value) fail(tag + "objective decreased on acceptance");
      beta = e.candidate;
      current = value;
    }
  }
  if (!(beta == result.beta)) fail("final beta does not match the replayed state");
  if (current.value != result.final_value.value) fail("final objective does not match the replayed state");
  if (current.covered < need) fail("final coverage constraint violated");
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline and persistence
// ---------------------------------------------------------------------------

CalibrationResult calibrate(std::span<const ScoreTrace> traces, const CoverConfig& config) {
  check_alpha(config.alpha);
  if (traces.empty()) throw ValidationError("calibrate: no calibration traces");
  if (!(config.gamma >= 0.0 && config.gamma < 1.0)) throw ValidationError("calibrate: gamma must lie in [0, 1)");
  for (const auto& t : traces) validate(t);
  const int L = config.max_len > 0 ? config.max_len : static_cast<int>(max_length(traces));
  if (L < 1) throw ValidationError("calibrate: traces are empty");

  CalibrationResult out;
  const std::uint64_t split_seed = derive_seed(config.seed, 1);
  const std::uint64_t cluster_seed = derive_seed(config.seed, 2);
  const std::uint64_t optimize_seed = derive_seed(config.seed, 3);
  out.split = split_dataset(traces, config.gamma, split_seed);
  const auto d1 = select(traces, out.split.clustering);
  const auto d2 = select(traces, out.split.calibration);
  if (d2.empty()) throw ValidationError("calibrate: proper calibration split is empty");

  ClusteringOptions copts;
  copts.clusters = config.clusters;
  copts.min_count = config.min_count;
  copts.bucket_width = config.bucket_width;
  copts.tau_grid = config.tau_grid;
  copts.scale = config.scale;
  copts.seed = cluster_seed;
  out.clustering = build_assignment(d1, L, copts);
  out.warnings = out.clustering.warnings;

  const CalibrationIndex index(d2, out.clustering.assignment, config.scale);
  OptimizeOptions oopts;
  oopts.alpha = config.alpha;
  oopts.lambda = config.lambda;
  oopts.budget = config.budget;
  oopts.epsilon = config.epsilon;
  oopts.seed = optimize_seed;
  oopts.tradeoff = config.tradeoff;
  out.optimization = optimize(index, oopts);
  for (const auto& w : out.optimization.warnings) out.warnings.push_back(w);

  auto& m = out.model;
  m.alpha = config.alpha;
  m.lambda = config.lambda;
  m.clusters = config.clusters;
  m.min_count = config.min_count;
  m.bucket_width = config.bucket_width;
  m.tau_grid = config.tau_grid;
  m.gamma = config.gamma;
  m.budget = config.budget;
  m.epsilon = out.optimization.epsilon;
  m.scale = config.scale;
  m.tradeoff = config.tradeoff;
  m.max_len = L;
  m.assignment = out.clustering.assignment;
  m.beta = out.optimization.beta;
  m.thresholds = cover_thresholds(m.beta, d2, m.assignment, config.scale);
  m.seeds = {{"seed", config.seed}, {"split", split_seed}, {"clustering", cluster_seed}, {"optimize", optimize_seed}};
  m.counts = {{"n", traces.size()},
              {"n1", d1.size()},
              {"n2", d2.size()},
              {"covered", out.optimization.final_value.covered},
              {"need", out.optimization.need},
              {"accepted", out.optimization.accepted}};
  return out;
}

nlohmann::json CalibratedModel::to_json() const {
  nlohmann::json q = nlohmann::json::object();
  for (int l = 1; l <= thresholds.max_len(); ++l) {
    for (ClusterId c = 0; c <= clusters; ++c) q[pair_key(l, c)] = encode_double(thresholds.threshold(l, c));
  }
  return {{"kind", "cover"},
          {"alpha", alpha},
          {"lambda", lambda.to_json()},
          {"M", clusters},
          {"min_count", min_count},
          {"bucket_width", bucket_width},
          {"tau_grid", tau_grid},
          {"gamma", gamma},
          {"budget", budget},
          {"epsilon", epsilon},
          {"score_scale", to_string(scale)},
          {"tradeoff", to_string(tradeoff)},
          {"max_len", max_len},
          {"assignment", assignment.to_json()},
          {"beta", beta.to_json()},
          {"thresholds", q},
          {"seeds", seeds},
          {"counts", counts}};
}

CalibratedModel CalibratedModel::from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("kind", std::string()) != "cover") throw ValidationError("not a cover model document");
    CalibratedModel m;
    m.alpha = doc.at("alpha").get<double>();
    m.lambda = LambdaTable::from_json(doc.at("lambda"));
    m.clusters = doc.at("M").get<int>();
    m.min_count = doc.at("min_count").get<std::size_t>();
    m.bucket_width = doc.at("bucket_width").get<int>();
    m.tau_grid = doc.at("tau_grid").get<std::vector<double>>();
    m.gamma = doc.value("gamma", 0.5);
    m.budget = doc.value("budget", std::size_t{0});
    m.epsilon = doc.value("epsilon", 0.0);
    m.scale = parse_score_scale(doc.at("score_scale").get<std::string>());
    m.tradeoff = parse_tradeoff_rule(doc.value("tradeoff", std::string("exchange")));
    m.max_len = doc.at("max_len").get<int>();
    if (m.clusters < 0 || m.max_len < 1) throw ValidationError("cover model: invalid M or max_len");
    m.assignment = ClusterAssignment::from_json(doc.at("assignment"), m.clusters, m.bucket_width, m.max_len);
    m.beta = BetaMatrix::from_json(doc.at("beta"));
    if (m.beta.clusters() != m.clusters || m.beta.buckets() != m.assignment.bucket_count()) {
      throw ValidationError("cover model: beta shape does not match M and the bucket count");
    }
    m.thresholds.scale = m.scale;
    m.thresholds.assignment = m.assignment;
    m.thresholds.table.assign(static_cast<std::size_t>(m.max_len),
                              std::vector<double>(static_cast<std::size_t>(m.clusters + 1),
                                                  std::numeric_limits<double>::quiet_NaN()));
    for (const auto& [key, v] : doc.at("thresholds").items()) {
      const auto [l, c] = parse_pair_key(key);
      if (l > m.max_len || c > m.clusters) throw ValidationError("cover model: threshold key " + key + " out of range");
      m.thresholds.table[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(c)] = decode_double(v);
    }
    for (int l = 1; l <= m.max_len; ++l) {
      for (ClusterId c = 0; c <= m.clusters; ++c) {
        if (std::isnan(m.thresholds.table[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(c)])) {
          throw ValidationError("cover model: missing threshold " + pair_key(l, c));
        }
      }
    }
    if (doc.contains("seeds")) m.seeds = doc["seeds"].get<std::map<std::string, std::uint64_t>>();
    if (doc.contains("counts")) m.counts = doc["counts"].get<std::map<std::string, std::size_t>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("cover model document: ") + e.what());
  }
}

void CalibratedModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_json().dump(2) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

CalibratedModel CalibratedModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return from_json(doc);
}

DecodeResult cover_decode(const Scorer& scorer, const CalibratedModel& model, int max_len,
                          const DecodeLimits& limits) {
  return conformal_expand(scorer, model.thresholds, max_len, limits);
}

}  // namespace cover
