#include "cover/pac.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cover/error.hpp"

namespace cover {

namespace {

void check_prob(double p, const char* name) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError(std::string(name) + " must lie in (0, 1)");
}

void check_n(std::size_t n) {
  if (n == 0) throw ValidationError("sample size must be >= 1");
}

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace

double bernstein_slack(double var, std::size_t n, double delta) {
  check_n(n);
  check_prob(delta, "delta");
  if (var < 0.0) throw ValidationError("variance must be non-negative");
  const double lg = std::log(3.0 / delta);
  const double nn = static_cast<double>(n);
  return std::sqrt(2.0 * var * lg / nn) + 3.0 * lg / nn;
}

double empirical_bernstein(double mean, double var, std::size_t n, double delta) {
  return mean + bernstein_slack(var, n, delta);
}

double hoeffding_slack(std::size_t n, double zeta) {
  check_n(n);
  check_prob(zeta, "zeta");
  return std::sqrt(std::log(2.0 / zeta) / (2.0 * static_cast<double>(n)));
}

double hoeffding_upper(double p_hat, std::size_t n, double zeta) {
  if (!(p_hat >= 0.0 && p_hat <= 1.0)) throw ValidationError("p_hat must lie in [0, 1]");
  return std::min(1.0, p_hat + hoeffding_slack(n, zeta));
}

double incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double beta_quantile(double delta, double a, double b) {
  check_prob(delta, "delta");
  if (!(a > 0.0 && b > 0.0)) throw ValidationError("beta_quantile: a and b must be positive");
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    if (incomplete_beta(mid, a, b) < delta) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double beam_subgroup_coverage_bound(double alpha, double delta, std::size_t in_beam, std::size_t total) {
  check_prob(alpha, "alpha");
  if (in_beam == 0) throw ValidationError("beam subgroup is empty");
  if (in_beam > total) throw ValidationError("in-beam count exceeds the calibration size");
  return (1.0 - alpha) * beta_quantile(delta, static_cast<double>(in_beam),
                                       static_cast<double>(total + 1 - in_beam));
}

std::string to_string(ZetaDenominator d) { return d == ZetaDenominator::PairCount ? "pair" : "total"; }
std::string to_string(BoundVariant v) { return v == BoundVariant::Main ? "main" : "appendix"; }

ZetaDenominator parse_zeta_denominator(const std::string& name) {
  if (name == "pair") return ZetaDenominator::PairCount;
  if (name == "total") return ZetaDenominator::Total;
  throw ValidationError("unknown zeta denominator '" + name + "'");
}

BoundVariant parse_bound_variant(const std::string& name) {
  if (name == "main") return BoundVariant::Main;
  if (name == "appendix") return BoundVariant::Appendix;
  throw ValidationError("unknown bound variant '" + name + "'");
}

PairBound pair_failure_bound(const PairStats& stats, std::size_t total) {
  if (!(stats.eps_hat >= 0.0 && stats.eps_hat <= 1.0)) throw ValidationError("eps_hat must lie in [0, 1]");
  PairBound out;
  out.stats = stats;
  out.frequency_factor = std::clamp(hoeffding_upper(stats.p_hat, total, stats.zeta), 0.0, 1.0);
  if (stats.n_lm == 0) {
    out.vacuous = true;
    out.error_factor = 1.0;
  } else {
    out.error_factor = std::clamp(empirical_bernstein(stats.eps_hat, stats.v_hat, stats.n_lm, stats.delta), 0.0, 1.0);
  }
  out.bound = out.frequency_factor * out.error_factor;
  return out;
}

BoundReport full_path_bound(std::span<const PairStats> stats, double base, BoundVariant variant, std::size_t total,
                            ZetaDenominator zeta_denominator) {
  check_n(total);
  BoundReport r;
  r.variant = variant;
  r.zeta_denominator = zeta_denominator;
  r.total = total;
  r.base = base;
  std::set<std::pair<int, ClusterId>> seen;
  for (const auto& s : stats) {
    if (!seen.insert({s.step, s.cluster}).second) {
      throw ValidationError("full_path_bound: duplicate pair " + std::to_string(s.step) + ":" + cluster_name(s.cluster));
    }
    r.total_confidence += s.delta + s.zeta;
  }
  if (!(r.total_confidence < 1.0)) throw ValidationError("full_path_bound: sum of delta + zeta must be below 1");
  for (const auto& s : stats) {
    if (s.n_lm == 0) throw ValidationError("full_path_bound: pair with n_lm = 0");
    PairTerm t;
    t.step = s.step;
    t.cluster = s.cluster;
    t.bernstein_term = s.p_hat * bernstein_slack(s.v_hat, s.n_lm, s.delta);
    const std::size_t n = zeta_denominator == ZetaDenominator::PairCount ? s.n_lm : total;
    t.hoeffding_term = s.eps_hat * hoeffding_slack(n, s.zeta);
    r.bernstein_sum += t.bernstein_term;
    r.hoeffding_sum += t.hoeffding_term;
    r.terms.push_back(t);
    r.pairs.push_back(pair_failure_bound(s, total));
  }
  r.aggregate = r.base + r.bernstein_sum + r.hoeffding_sum;
  r.aggregate_clipped = std::min(1.0, r.aggregate);
  return r;
}

nlohmann::json BoundReport::to_json() const {
  nlohmann::json pairs_doc = nlohmann::json::array();
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& s = pairs[i].stats;
    pairs_doc.push_back({{"pair", std::to_string(s.step) + ":" + cluster_name(s.cluster)},
                         {"n_lm", s.n_lm},
                         {"failures", s.failures},
                         {"eps_hat", s.eps_hat},
                         {"v_hat", s.v_hat},
                         {"p_hat", s.p_hat},
                         {"delta", s.delta},
                         {"zeta", s.zeta},
                         {"bernstein_term", terms[i].bernstein_term},
                         {"hoeffding_term", terms[i].hoeffding_term},
                         {"pair_bound", pairs[i].bound},
                         {"vacuous", pairs[i].vacuous}});
  }
  return {{"variant", cover::to_string(variant)},
          {"zeta_denominator", cover::to_string(zeta_denominator)},
          {"N", total},
          {"base", base},
          {"bernstein_sum", bernstein_sum},
          {"hoeffding_sum", hoeffding_sum},
          {"aggregate", aggregate},
          {"aggregate_clipped", aggregate_clipped},
          {"total_confidence", total_confidence},
          {"pairs", pairs_doc}};
}

std::vector<PairStats> pair_stats(std::span<const PathEvalRecord> records, double delta, double zeta) {
  check_prob(delta, "delta");
  check_prob(zeta, "zeta");
  if (records.empty()) throw ValidationError("pair_stats: no records");
  std::map<std::pair<int, ClusterId>, std::pair<std::size_t, std::size_t>> tally;  // (reached, failed)
  for (const auto& r : records) {
    for (const auto& s : r.steps) {
      auto& cell = tally[{s.step, s.cluster}];
      ++cell.first;
      if (!s.passed) {
        ++cell.second;
        break;
      }
    }
  }
  const double N = static_cast<double>(records.size());
  const double share = 1.0 / static_cast<double>(tally.size());
  std::vector<PairStats> out;
  for (const auto& [key, cell] : tally) {
    PairStats s;
    s.step = key.first;
    s.cluster = key.second;
    s.n_lm = cell.first;
    s.failures = cell.second;
    s.eps_hat = static_cast<double>(s.failures) / static_cast<double>(s.n_lm);
    s.v_hat = s.eps_hat * (1.0 - s.eps_hat);
    s.p_hat = static_cast<double>(s.n_lm) / N;
    s.delta = delta * share;
    s.zeta = zeta * share;
    out.push_back(s);
  }
  return out;
}

double empirical_noncoverage(std::span<const PathEvalRecord> records) {
  if (records.empty()) return 0.0;
  std::size_t bad = 0;
  for (const auto& r : records) bad += r.covered ? 0 : 1;
  return static_cast<double>(bad) / static_cast<double>(records.size());
}

DecompositionAudit decomposition_audit(std::span<const PathEvalRecord> records,
                                       const std::optional<std::map<std::pair<int, ClusterId>, std::size_t>>& expected) {
  DecompositionAudit a;
  a.total = records.size();
  for (const auto& r : records) {
    if (r.covered) {
      ++a.covered;
      if (r.first_failure) a.violations.push_back("trace " + r.trace_id + ": covered but has a first failure");
    } else {
      ++a.uncovered;
      if (!r.first_failure) {
        a.violations.push_back("trace " + r.trace_id + ": uncovered without a first failure");
      } else {
        ++a.cells[*r.first_failure];
      }
    }
    bool failed = false;
    for (const auto& s : r.steps) {
      if (failed && s.passed) a.violations.push_back("trace " + r.trace_id + ": step passed after the first failure");
      if (!s.passed) failed = true;
    }
  }
  for (const auto& [key, count] : a.cells) a.cell_sum += count;
  if (a.cell_sum != a.uncovered) {
    a.violations.push_back("first-failure tallies sum to " + std::to_string(a.cell_sum) + " but " +
                           std::to_string(a.uncovered) + " traces are uncovered");
  }
  if (a.covered + a.uncovered != a.total) a.violations.push_back("covered + uncovered != total");
  if (expected) {
    std::set<std::pair<int, ClusterId>> keys;
    for (const auto& [k, v] : a.cells) keys.insert(k);
    for (const auto& [k, v] : *expected) keys.insert(k);
    for (const auto& k : keys) {
      const auto got = a.cells.count(k) ? a.cells.at(k) : 0;
      const auto want = expected->count(k) ? expected->at(k) : 0;
      if (got != want) {
        a.violations.push_back("pair " + std::to_string(k.first) + ":" + cluster_name(k.second) + " tallies " +
                               std::to_string(got) + " first failures, expected " + std::to_string(want));
      }
    }
  }
  return a;
}

}  // namespace cover
