#include <doctest.h>

#include <cmath>
#include <tuple>

#include "cover/error.hpp"
#include "cover/pac.hpp"
#include "support.hpp"

using namespace cover;

namespace {

PairStats stats(int l, ClusterId m, std::size_t n, std::size_t fails, std::size_t N, double delta, double zeta) {
  PairStats s;
  s.step = l;
  s.cluster = m;
  s.n_lm = n;
  s.failures = fails;
  s.eps_hat = n == 0 ? 0.0 : static_cast<double>(fails) / static_cast<double>(n);
  s.v_hat = s.eps_hat * (1.0 - s.eps_hat);
  s.p_hat = static_cast<double>(n) / static_cast<double>(N);
  s.delta = delta;
  s.zeta = zeta;
  return s;
}

// Simpson's rule on the Beta density, an independent route to I_x(a, b).
double beta_cdf_simpson(double x, double a, double b) {
  const int n = 20000;
  const double h = x / n;
  const double lb = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  auto f = [&](double t) {
    if (t <= 0.0) return a == 1.0 ? std::exp(-lb) : 0.0;
    return std::exp((a - 1) * std::log(t) + (b - 1) * std::log1p(-t) - lb);
  };
  double s = f(0.0) + f(x);
  for (int i = 1; i < n; ++i) s += f(i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

TEST_CASE("empirical Bernstein") {
  CHECK(empirical_bernstein(0.0, 0.0, 100, 0.05) == doctest::Approx(3.0 * std::log(60.0) / 100.0).epsilon(1e-14));
  CHECK(empirical_bernstein(0.0, 0.0, 100, 0.05) == doctest::Approx(0.1228).epsilon(1e-3));
  CHECK(empirical_bernstein(0.2, 0.0, 50, 0.1) == doctest::Approx(0.2 + 3.0 * std::log(30.0) / 50.0));
  double prev = kInfinity;
  for (std::size_t n = 1; n < 2000; n += 37) {
    const double b = empirical_bernstein(0.1, 0.09, n, 0.05);
    CHECK(b < prev);
    prev = b;
  }
  CHECK_THROWS_AS(empirical_bernstein(0.1, 0.0, 0, 0.05), ValidationError);
  CHECK_THROWS_AS(empirical_bernstein(0.1, 0.0, 10, 1.0), ValidationError);
}

TEST_CASE("Hoeffding upper bound") {
  CHECK(hoeffding_upper(0.5, 200, 0.05) == doctest::Approx(0.5 + std::sqrt(std::log(40.0) / 400.0)).epsilon(1e-14));
  CHECK(hoeffding_upper(0.5, 200, 0.05) == doctest::Approx(0.5960).epsilon(1e-3));
  CHECK(hoeffding_upper(0.0, 50, 1.0 - 1e-12) == doctest::Approx(std::sqrt(std::log(2.0) / 100.0)).epsilon(1e-9));
  CHECK(hoeffding_upper(0.99, 2, 0.05) == 1.0);
  CHECK_THROWS_AS(hoeffding_upper(0.5, 0, 0.05), ValidationError);
}

TEST_CASE("pair failure bound is the product of the two factors") {
  SUBCASE("zero error") {
    const auto s = stats(2, 1, 40, 0, 400, 0.01, 0.01);
    const auto b = pair_failure_bound(s, 400);
    CHECK(b.bound == hoeffding_upper(0.1, 400, 0.01) * (3.0 * std::log(300.0) / 40.0));
  }
  SUBCASE("zero frequency") {
    auto s = stats(2, 1, 40, 4, 400, 0.01, 0.01);
    s.p_hat = 0.0;
    const auto b = pair_failure_bound(s, 400);
    CHECK(b.frequency_factor == hoeffding_slack(400, 0.01));
  }
  SUBCASE("random stats") {
    Rng rng(1);
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t N = 50 + uniform_index(rng, 2000);
      const std::size_t n = 1 + uniform_index(rng, N);
      const std::size_t f = uniform_index(rng, n + 1);
      const auto s = stats(1, 0, n, f, N, 0.001 + 0.1 * uniform01(rng), 0.001 + 0.1 * uniform01(rng));
      const auto b = pair_failure_bound(s, N);
      const double freq = std::min(1.0, hoeffding_upper(s.p_hat, N, s.zeta));
      const double err = std::min(1.0, empirical_bernstein(s.eps_hat, s.v_hat, n, s.delta));
      CHECK(b.bound == freq * err);
      CHECK_FALSE(b.vacuous);
    }
  }
  SUBCASE("unreached pair is vacuous") {
    const auto b = pair_failure_bound(stats(3, 2, 0, 0, 100, 0.01, 0.01), 100);
    CHECK(b.vacuous);
    CHECK(b.error_factor == 1.0);
  }
}

TEST_CASE("bounds are monotone") {
  auto one = [](std::size_t n, std::size_t f, std::size_t N, double d, double z) {
    const std::vector<PairStats> v{stats(1, 1, n, f, N, d, z)};
    return full_path_bound(v, 0.1, BoundVariant::Main, N).aggregate;
  };
  // same frequency and error rate, more data
  CHECK(one(200, 10, 1000, 0.05, 0.05) > one(400, 20, 2000, 0.05, 0.05));
  CHECK(one(200, 10, 1000, 0.05, 0.05) < one(200, 20, 1000, 0.05, 0.05));
  CHECK(one(200, 10, 1000, 0.05, 0.05) < one(200, 10, 1000, 0.01, 0.05));
  CHECK(one(200, 10, 1000, 0.05, 0.05) < one(200, 10, 1000, 0.05, 0.01));
}

TEST_CASE("full-path aggregation") {
  SUBCASE("huge samples collapse to the base") {
    const std::size_t N = 1'000'000'000'000ULL;
    const std::vector<PairStats> v{stats(1, 0, N / 2, 0, N, 0.01, 0.01), stats(2, 0, N / 4, 0, N, 0.01, 0.01)};
    const auto r = full_path_bound(v, 0.1, BoundVariant::Main, N);
    CHECK(r.aggregate == doctest::Approx(0.1).epsilon(1e-4));
  }
  SUBCASE("single pair") {
    const auto s = stats(2, 1, 100, 7, 500, 0.02, 0.03);
    const std::vector<PairStats> v{s};
    const auto r = full_path_bound(v, 0.1, BoundVariant::Main, 500);
    const double bern = s.p_hat * bernstein_slack(s.v_hat, 100, 0.02);
    const double hoef = s.eps_hat * hoeffding_slack(100, 0.03);
    CHECK(r.aggregate == 0.1 + bern + hoef);
    const auto t = full_path_bound(v, 0.1, BoundVariant::Appendix, 500, ZetaDenominator::Total);
    CHECK(t.aggregate == 0.1 + bern + s.eps_hat * hoeffding_slack(500, 0.03));
  }
  SUBCASE("aggregate is reproducible from its parts") {
    Rng rng(5);
    std::vector<PairStats> v;
    for (int l = 1; l <= 6; ++l) v.push_back(stats(l, l % 3, 30 + uniform_index(rng, 100), uniform_index(rng, 20), 800, 0.005, 0.005));
    const auto r = full_path_bound(v, 0.07, BoundVariant::Main, 800);
    double sum = r.base;
    for (const auto& t : r.terms) sum += t.bernstein_term;
    for (const auto& t : r.terms) sum += t.hoeffding_term;
    CHECK(r.aggregate == doctest::Approx(sum).epsilon(1e-14));
    CHECK(r.aggregate_clipped == std::min(1.0, r.aggregate));
    CHECK(r.total_confidence == doctest::Approx(0.06));
    const auto doc = r.to_json();
    CHECK(doc["pairs"].size() == 6);
    CHECK(doc["aggregate"].get<double>() == r.aggregate);
  }
  SUBCASE("errors") {
    const std::vector<PairStats> dup{stats(1, 0, 10, 1, 100, 0.01, 0.01), stats(1, 0, 10, 1, 100, 0.01, 0.01)};
    CHECK_THROWS_AS(full_path_bound(dup, 0.1, BoundVariant::Main, 100), ValidationError);
    const std::vector<PairStats> greedy{stats(1, 0, 10, 1, 100, 0.5, 0.5)};
    CHECK_THROWS_AS(full_path_bound(greedy, 0.1, BoundVariant::Main, 100), ValidationError);
    const std::vector<PairStats> unreached{stats(1, 0, 0, 0, 100, 0.01, 0.01)};
    CHECK_THROWS_AS(full_path_bound(unreached, 0.1, BoundVariant::Main, 100), ValidationError);
  }
}

TEST_CASE("beta quantile") {
  for (double d : {0.01, 0.2, 0.5, 0.9}) CHECK(beta_quantile(d, 1.0, 1.0) == doctest::Approx(d).epsilon(1e-9));
  for (double a : {0.5, 2.0, 7.0, 40.0}) CHECK(beta_quantile(0.5, a, a) == doctest::Approx(0.5).epsilon(1e-9));
  for (auto [x, a, b] : {std::tuple{0.3, 2.0, 5.0}, std::tuple{0.8, 50.0, 10.0}, std::tuple{0.6, 3.5, 1.5}}) {
    CHECK(incomplete_beta(x, a, b) == doctest::Approx(beta_cdf_simpson(x, a, b)).epsilon(1e-7));
  }
  const double q = beta_quantile(0.05, 50.0, 10.0);
  CHECK(incomplete_beta(q, 50.0, 10.0) == doctest::Approx(0.05).epsilon(1e-7));
  CHECK_THROWS_AS(beta_quantile(0.05, 0.0, 1.0), ValidationError);
}

TEST_CASE("pair statistics and decomposition audit") {
  auto rec = [](const std::string& id, std::vector<std::pair<ClusterId, bool>> steps) {
    PathEvalRecord r;
    r.trace_id = id;
    int l = 0;
    for (auto [m, pass] : steps) {
      StepCheck s;
      s.step = ++l;
      s.cluster = m;
      s.passed = pass && r.covered;
      if (r.covered && !s.passed) {
        r.covered = false;
        r.first_failure = std::make_pair(s.step, m);
      }
      r.steps.push_back(s);
    }
    return r;
  };
  SUBCASE("all covered") {
    const std::vector<PathEvalRecord> rs{rec("a", {{1, true}, {2, true}}), rec("b", {{0, true}})};
    const auto a = decomposition_audit(rs);
    CHECK(a.ok());
    CHECK(a.cells.empty());
    CHECK(a.uncovered == 0);
  }
  SUBCASE("one failure at (2, m)") {
    const std::vector<PathEvalRecord> rs{rec("a", {{1, true}, {2, false}, {1, true}}), rec("b", {{0, true}})};
    const auto a = decomposition_audit(rs);
    CHECK(a.ok());
    REQUIRE(a.cells.size() == 1);
    CHECK(a.cells.begin()->first == std::make_pair(2, 2));
    CHECK(a.cells.begin()->second == 1);
    const auto ps = pair_stats(rs, 0.05, 0.05);
    // (1,0), (1,1), (2,2): the step after the failure is not reached.
    CHECK(ps.size() == 3);
    for (const auto& s : ps) CHECK(s.delta == doctest::Approx(0.05 / 3));
  }
  SUBCASE("expected tallies are compared pair by pair") {
    const std::vector<PathEvalRecord> rs{rec("a", {{1, false}})};
    std::map<std::pair<int, ClusterId>, std::size_t> want{{{1, 2}, 1}};
    const auto a = decomposition_audit(rs, want);
    CHECK_FALSE(a.ok());
    CHECK(a.violations.front().find("1:") != std::string::npos);
  }
  SUBCASE("a corrupted record is caught") {
    auto r = rec("a", {{1, true}});
    r.covered = false;
    const std::vector<PathEvalRecord> rs{r};
    CHECK_FALSE(decomposition_audit(rs).ok());
  }
  SUBCASE("random rules keep the identity") {
    const auto traces = testing::random_traces(500, 5, 4, 12);
    StepThresholds rule;
    rule.assignment.clusters = 2;
    rule.assignment.max_len = 4;
    rule.assignment.buckets.resize(4);
    for (auto& b : rule.assignment.buckets) {
      for (Token t = 0; t < 5; ++t) b[t] = t % 3;
    }
    Rng rng(2);
    for (int l = 0; l < 4; ++l) rule.table.push_back({0.3 * uniform01(rng), 0.3 * uniform01(rng), 0.3 * uniform01(rng)});
    std::vector<PathEvalRecord> rs;
    for (const auto& t : traces) rs.push_back(evaluate_path(t, rule));
    auto a = decomposition_audit(rs);
    CHECK(a.ok());
    CHECK(a.cell_sum == a.uncovered);
    CHECK(empirical_noncoverage(rs) == static_cast<double>(a.uncovered) / 500.0);
    std::size_t fails = 0;
    for (const auto& s : pair_stats(rs, 0.05, 0.05)) {
      fails += s.failures;
      CHECK(a.cells[{s.step, s.cluster}] == s.failures);
    }
    CHECK(fails == a.uncovered);
  }
}
