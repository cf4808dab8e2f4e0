#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "cover/baseline.hpp"
#include "cover/cover.hpp"
#include "cover/error.hpp"
#include "support.hpp"

using namespace cover;

namespace {

LongTailConfig toy(std::uint64_t seed) {
  LongTailConfig c;
  c.vocab_size = 12;
  c.order = 1;
  c.max_len = 5;
  c.head_tokens = {0, 1, 2};
  c.tail_tokens = {3, 4, 5, 6, 7, 8, 9, 10, 11};
  c.tail_mass = 0.15;
  c.noise = 0.5;
  c.seed = seed;
  c.terminator = 0;
  return c;
}

// Random token -> cluster map per bucket, tokens 0..V-1, clusters 0..M.
BetaMatrix random_beta(int M, int buckets, Rng& rng) {
  BetaMatrix b(M, buckets);
  for (ClusterId m = 0; m <= M; ++m) {
    for (int k = 0; k < buckets; ++k) b.set(m, k, uniform01(rng));
  }
  return b;
}

ScoreTrace trace_of(const testing::RandomModel& rm, const std::vector<Token>& seq, const std::string& id) {
  ScoreTrace t;
  t.id = id;
  std::vector<Token> p;
  for (Token a : seq) {
    p.push_back(a);
    t.tokens.push_back(a);
    t.prefix_scores.push_back(rm.score(p));
  }
  return t;
}

}  // namespace

TEST_CASE("cluster quantile") {
  std::vector<ScoreTrace> d2;
  for (int i = 1; i <= 10; ++i) d2.push_back(ScoreTrace{"t" + std::to_string(i), {7}, {i / 10.0}});
  d2.push_back(ScoreTrace{"other", {3}, {0.05}});
  ClusterAssignment a;
  a.clusters = 2;
  a.max_len = 1;
  a.buckets = {{{7, 1}, {3, kNullCluster}}};
  BetaMatrix beta(2, 1);
  CHECK(cluster_quantile(beta, 1, 1, d2, a, ScoreScale::Raw) == 0.1);
  beta.set(1, 0, 1.0);
  CHECK(cluster_quantile(beta, 1, 1, d2, a, ScoreScale::Raw) == 1.0);
  beta.set(1, 0, 0.5);
  CHECK(cluster_quantile(beta, 1, 1, d2, a, ScoreScale::Raw) == 5 / 10.0);
  // Cluster 2 has no members; null pools everything running at step 1.
  CHECK(std::isinf(cluster_quantile(beta, 1, 2, d2, a, ScoreScale::Raw)));
  CHECK(cluster_quantile(beta, 1, kNullCluster, d2, a, ScoreScale::Raw) == 0.05);
  CHECK(cluster_quantile(beta, 1, 1, d2, a, ScoreScale::Log) == std::log(5 / 10.0));
}

TEST_CASE("coverage indicator") {
  ScoreTrace t{"x", {1, 2, 3}, {0.5, 0.2, 0.1}};
  StepThresholds open;
  open.assignment = ClusterAssignment::all_null(3);
  open.table.assign(3, {-kInfinity});
  CHECK(coverage_indicator(t, open).covered);

  auto first = open;
  first.table[0][0] = 0.6;
  const auto rec = coverage_indicator(t, first);
  CHECK_FALSE(rec.covered);
  REQUIRE(rec.first_failure);
  CHECK(*rec.first_failure == std::make_pair(1, kNullCluster));
}

TEST_CASE("indicator agrees with membership in the expanded set") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto rm = testing::random_model(4, 1, 3, Token{0}, 500 + seed);
    const auto model = rm.build();
    StepThresholds rule;
    rule.scale = ScoreScale::Log;
    rule.assignment = testing::random_assignment(4, 2, 1, 3, seed);
    Rng rng(seed);
    for (int l = 1; l <= 3; ++l) {
      std::vector<double> row;
      for (int m = 0; m <= 2; ++m) row.push_back(std::log(0.02 + 0.5 * uniform01(rng)) * l * 0.7);
      rule.table.push_back(row);
    }
    const auto res = conformal_expand(model, rule, 3);
    const std::set<std::vector<Token>> members(res.sequences.begin(), res.sequences.end());
    for (const auto& s : testing::complete_sequences(4, 3, Token{0})) {
      CHECK(coverage_indicator(trace_of(rm, s, "s"), rule).covered == (members.count(s) == 1));
    }
  }
}

TEST_CASE("empirical cluster error") {
  const auto d2 = testing::random_traces(300, 6, 4, 77);
  const auto a = testing::random_assignment(6, 2, 2, 4, 78);
  SUBCASE("beta zero prunes nothing") {
    const auto rule = cover_thresholds(BetaMatrix(2, 2), d2, a);
    for (int l = 1; l <= 4; ++l) {
      for (ClusterId m = 0; m <= 2; ++m) CHECK(empirical_cluster_error(l, m, rule, d2).value == 0.0);
    }
  }
  SUBCASE("record replay") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      const auto rule = cover_thresholds(random_beta(2, 2, rng), d2, a);
      std::map<std::pair<int, ClusterId>, std::size_t> fails, alive;
      for (const auto& t : d2) {
        const auto rec = evaluate_path(t, rule);
        for (const auto& s : rec.steps) {
          ++alive[{s.step, s.cluster}];
          if (!s.passed) {
            ++fails[{s.step, s.cluster}];
            break;
          }
        }
      }
      for (int l = 1; l <= 4; ++l) {
        for (ClusterId m = 0; m <= 2; ++m) {
          const auto e = empirical_cluster_error(l, m, rule, d2);
          CHECK(e.failures == fails[{l, m}]);
          CHECK(e.survivors == alive[{l, m}]);
          if (l == 1) {
            std::size_t below = 0, total = 0;
            for (const auto& t : d2) {
              if (a.cluster_of(1, t.tokens[0]) != m) continue;
              ++total;
              below += std::log(t.prefix_scores[0]) < rule.threshold(1, m) ? 1 : 0;
            }
            CHECK(e.failures == below);
            CHECK(e.survivors == total);
          }
        }
      }
    }
  }
}

TEST_CASE("objective") {
  const auto d2 = testing::random_traces(200, 5, 3, 90);
  const auto a = testing::random_assignment(5, 2, 1, 3, 91);
  LambdaTable zero;
  zero.uniform = 0.0;
  SUBCASE("lambda zero sums thresholds; beta zero sums minima") {
    const BetaMatrix beta(2, 3);
    const auto rule = cover_thresholds(beta, d2, a);
    double sum = 0.0;
    for (int l = 1; l <= 3; ++l) {
      for (ClusterId m = 0; m <= 2; ++m) {
        std::vector<double> idx;
        for (const auto& t : d2) {
          if (t.length() < static_cast<std::size_t>(l)) continue;
          if (m == kNullCluster || a.cluster_of(l, t.tokens[l - 1]) == m) idx.push_back(std::log(t.prefix_scores[l - 1]));
        }
        if (idx.empty()) continue;
        const double mn = *std::min_element(idx.begin(), idx.end());
        CHECK(rule.threshold(l, m) == mn);
        sum += mn;
      }
    }
    CHECK(objective(beta, d2, a, zero).value == sum);
    CHECK(objective(beta, d2, a, LambdaTable{}).value == sum);
  }
  SUBCASE("recomputed from thresholds and errors") {
    Rng rng(4);
    LambdaTable lam;
    lam.uniform = 2.5;
    lam.overrides[{2, 1}] = 7.0;
    for (int rep = 0; rep < 10; ++rep) {
      const auto beta = random_beta(2, 3, rng);
      const auto rule = cover_thresholds(beta, d2, a);
      double sum = 0.0;
      for (int l = 1; l <= 3; ++l) {
        for (ClusterId m = 0; m <= 2; ++m) {
          const double q = rule.threshold(l, m);
          if (std::isinf(q)) continue;
          sum += q - lam.at(l, m) * empirical_cluster_error(l, m, rule, d2).value;
        }
      }
      CHECK(objective(beta, d2, a, lam).value == doctest::Approx(sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("rank index matches the reference route exactly") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto d2 = testing::random_traces(250, 6, 5, 300 + seed);
    const auto a = testing::random_assignment(6, 3, 2, 5, 400 + seed);
    const CalibrationIndex index(d2, a);
    Rng rng(seed);
    LambdaTable lam;
    lam.uniform = 0.5 + uniform01(rng);
    for (int rep = 0; rep < 20; ++rep) {
      auto beta = random_beta(3, a.bucket_count(), rng);
      if (rep % 4 == 0) {
        // grid values, where ties in order_index are most likely
        for (ClusterId m = 0; m <= 3; ++m) {
          for (int b = 0; b < a.bucket_count(); ++b) beta.set(m, b, std::floor(beta.at(m, b) * 10) / 10);
        }
      }
      const auto ref = objective(beta, d2, a, lam);
      const auto fast = index.objective(beta, lam);
      CHECK(fast.value == ref.value);
      CHECK(fast.covered == ref.covered);
      CHECK(index.covered_count(beta) == ref.covered);
      for (int l = 1; l <= 5; ++l) {
        for (ClusterId m = 0; m <= 3; ++m) CHECK(index.threshold(beta, l, m) == cluster_quantile(beta, l, m, d2, a));
      }
    }
  }
}

TEST_CASE("optimizer") {
  const auto lt = make_longtail_model(toy(12));
  const auto traces = sample_dataset(lt, 1200, 5);
  ClusteringOptions copts;
  copts.clusters = 3;
  copts.bucket_width = 2;
  copts.seed = 1;
  const auto split = split_dataset(traces, 0.5, 2);
  const auto d1 = select(traces, split.clustering);
  const auto d2 = select(traces, split.calibration);
  const auto a = build_assignment(d1, 5, copts).assignment;
  const CalibrationIndex index(d2, a);

  SUBCASE("targets") {
    CHECK(required_count(100, 0.1) == 90);
    CHECK(strict_count(100, 0.1) == 91);
    CHECK(phase1_count(100, 0.1) == 91);
    CHECK(required_count(7, 0.1) == 7);
  }
  SUBCASE("no budget returns the phase-1 point") {
    OptimizeOptions o;
    o.budget = 0;
    const auto r = optimize(index, o);
    CHECK(r.beta == r.phase1_beta);
    CHECK(r.epsilon == 1.0 / static_cast<double>(d2.size()));
    CHECK(r.phase1.covered >= phase1_count(d2.size(), 0.1));
    CHECK(r.audit.empty());
  }
  for (auto rule : {TradeoffRule::RaiseOnly, TradeoffRule::Exchange}) {
    CAPTURE(to_string(rule));
    OptimizeOptions o;
    o.budget = 150;
    o.seed = 9;
    o.tradeoff = rule;
    const auto r = optimize(index, o);
    CHECK(r.final_value.value >= r.phase1.value);
    CHECK(r.final_value.covered >= required_count(d2.size(), 0.1));
    CHECK(objective(r.beta, d2, a, o.lambda).covered == r.final_value.covered);
    double prev = r.phase1.value;
    for (const auto& e : r.audit) {
      if (!e.accepted) continue;
      CHECK(e.objective_after > prev);
      CHECK(e.covered_after >= required_count(d2.size(), 0.1));
      prev = e.objective_after;
    }
    const auto replay = replay_audit(r, d2, a, o);
    CHECK(replay.checked == r.audit.size() + 1);
    CHECK(replay.ok());
    // Same seed, same result.
    CHECK(optimize(index, o).beta == r.beta);

    // A tampered log is caught.
    if (!r.audit.empty()) {
      auto bad = r;
      bad.audit[0].objective_after += 1.0;
      CHECK_FALSE(replay_audit(bad, d2, a, o).ok());
    }
  }
  SUBCASE("infeasible target") {
    OptimizeOptions o;
    o.alpha = 1e-6;
    CHECK_THROWS_AS(optimize(index, o), InfeasibleError);
  }
}

TEST_CASE("raising beta never enlarges the set") {
  const auto rm = testing::random_model(4, 1, 3, Token{0}, 61);
  const auto model = rm.build();
  const auto sampled = sample_dataset(model, 400, 62);
  const auto a = testing::random_assignment(4, 2, 1, 3, 63);
  Rng rng(64);
  for (int rep = 0; rep < 20; ++rep) {
    const auto lo = random_beta(2, 3, rng);
    auto hi = lo;
    const auto m = static_cast<ClusterId>(uniform_index(rng, 3));
    const auto b = static_cast<int>(uniform_index(rng, 3));
    hi.set(m, b, std::min(1.0, lo.at(m, b) + uniform01(rng)));
    const auto r_lo = cover_thresholds(lo, sampled, a);
    const auto r_hi = cover_thresholds(hi, sampled, a);
    for (int l = 1; l <= 3; ++l) {
      for (ClusterId c = 0; c <= 2; ++c) CHECK(r_hi.threshold(l, c) >= r_lo.threshold(l, c));
    }
    const auto big = conformal_expand(model, r_lo, 3).sequences;
    const std::set<std::vector<Token>> big_set(big.begin(), big.end());
    for (const auto& s : conformal_expand(model, r_hi, 3).sequences) CHECK(big_set.count(s) == 1);
  }
}

TEST_CASE("reduction to a single uniform level") {
  SUBCASE("one step, one cluster: identical to DCBS") {
    auto traces = testing::random_traces(500, 5, 1, 80);
    const auto a = ClusterAssignment::all_null(1);
    BetaMatrix beta(0, 1, 0.1);
    const auto rule = cover_thresholds(beta, traces, a, ScoreScale::Raw);
    CHECK(rule.threshold(1, kNullCluster) == dcbs_calibrate(traces, 0.1, 1).thresholds[0]);
  }
  SUBCASE("every step uses the unconditioned quantile at the same level") {
    const auto traces = testing::random_traces(400, 5, 4, 81);
    ClusterAssignment a;
    a.clusters = 1;
    a.bucket_width = 4;
    a.max_len = 4;
    a.buckets.resize(1);
    for (Token t = 0; t < 5; ++t) a.buckets[0][t] = 1;
    BetaMatrix beta(1, 1, 0.2);
    const auto rule = cover_thresholds(beta, traces, a, ScoreScale::Raw);
    for (int l = 1; l <= 4; ++l) {
      std::vector<double> alive;
      for (const auto& t : traces) {
        if (t.length() >= static_cast<std::size_t>(l)) alive.push_back(t.prefix_scores[l - 1]);
      }
      CHECK(rule.threshold(l, 1) == testing::sort_quantile(0.2, alive));
      CHECK(rule.threshold(l, kNullCluster) == testing::sort_quantile(0.2, alive));
    }
  }
}

TEST_CASE("decoding with cluster thresholds equals the exhaustive filter") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto rm = testing::random_model(4, 2, 3, Token{3}, 700 + seed);
    const auto model = rm.build();
    CalibratedModel cm;
    cm.max_len = 3;
    cm.thresholds.scale = ScoreScale::Log;
    cm.thresholds.assignment = testing::random_assignment(4, 2, 1, 3, 800 + seed);
    Rng rng(seed);
    for (int l = 1; l <= 3; ++l) {
      std::vector<double> row;
      for (int m = 0; m <= 2; ++m) row.push_back(-3.0 * l * uniform01(rng));
      cm.thresholds.table.push_back(row);
    }
    const auto res = cover_decode(model, cm, 3);
    std::vector<std::vector<Token>> expect;
    for (const auto& s : testing::complete_sequences(4, 3, Token{3})) {
      bool keep = true;
      for (std::size_t l = 1; l <= s.size(); ++l) {
        const std::vector<Token> p(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(l));
        const ClusterId m = cm.thresholds.assignment.cluster_of(static_cast<int>(l), s[l - 1]);
        keep = keep && std::log(rm.score(p)) >= cm.thresholds.table[l - 1][static_cast<std::size_t>(m)];
      }
      if (keep) expect.push_back(s);
    }
    CHECK(res.sequences == expect);
  }
}

TEST_CASE("single cluster with DCBS thresholds reproduces DCBS decoding") {
  const auto lt = make_longtail_model(toy(3));
  const auto cal = sample_dataset(lt, 800, 2);
  const auto d = dcbs_calibrate(cal, 0.1, 5);
  CalibratedModel cm;
  cm.max_len = 5;
  cm.thresholds = d.rule();
  const auto a = cover_decode(lt, cm, 5);
  const auto b = dcbs_decode(lt, d, 5);
  CHECK(a.sequences == b.sequences);
  CHECK(a.expanded_nodes == b.expanded_nodes);
}

TEST_CASE("an infinite cluster threshold removes its tokens") {
  const auto lt = make_longtail_model(toy(4));
  CalibratedModel cm;
  cm.max_len = 3;
  cm.thresholds.scale = ScoreScale::Log;
  cm.thresholds.assignment = testing::random_assignment(12, 2, 1, 3, 5);
  cm.thresholds.table.assign(3, {-kInfinity, kInfinity, -kInfinity});
  const auto res = cover_decode(lt, cm, 3);
  CHECK_FALSE(res.sequences.empty());
  for (const auto& s : res.sequences) {
    for (std::size_t l = 1; l <= s.size(); ++l) CHECK(cm.thresholds.assignment.cluster_of(static_cast<int>(l), s[l - 1]) != 1);
  }
}

TEST_CASE("calibration pipeline") {
  const auto lt = make_longtail_model(toy(7));
  const auto traces = sample_dataset(lt, 1500, 8);
  CoverConfig cfg;
  cfg.clusters = 3;
  cfg.bucket_width = 2;
  cfg.budget = 200;
  cfg.seed = 5;
  const auto res = calibrate(traces, cfg);
  const auto& m = res.model;
  const auto d2 = select(traces, res.split.calibration);

  CHECK(m.max_len == 5);
  CHECK(cover_thresholds(m.beta, d2, m.assignment).table == m.thresholds.table);
  std::size_t covered = 0;
  for (const auto& t : d2) covered += evaluate_path(t, m.thresholds).covered ? 1 : 0;
  CHECK(static_cast<double>(covered) / static_cast<double>(d2.size()) >= 0.9 - 1e-12);

  OptimizeOptions o;
  o.alpha = cfg.alpha;
  o.lambda = cfg.lambda;
  o.budget = cfg.budget;
  o.seed = m.seeds.at("optimize");
  CHECK(replay_audit(res.optimization, d2, m.assignment, o).ok());

  SUBCASE("deterministic") { CHECK(calibrate(traces, cfg).model.to_json() == m.to_json()); }
  SUBCASE("document round trip") {
    const auto path = std::filesystem::temp_directory_path() / "cover_model_doc.json";
    m.save(path);
    const auto back = CalibratedModel::load(path);
    CHECK(back.to_json() == m.to_json());
    CHECK(back.thresholds.table == m.thresholds.table);
    CHECK(back.beta == m.beta);
    std::filesystem::remove(path);
  }
  SUBCASE("missing threshold key is rejected") {
    auto doc = m.to_json();
    doc["thresholds"].erase("1:null");
    CHECK_THROWS_AS(CalibratedModel::from_json(doc), ValidationError);
  }
}

TEST_CASE("beta matrix and lambda documents") {
  BetaMatrix b(2, 3);
  CHECK_THROWS_AS(b.set(1, 0, 1.5), ValidationError);
  b.set(2, 1, 0.25);
  CHECK(BetaMatrix::from_json(b.to_json()) == b);
  LambdaTable l;
  l.uniform = 3.0;
  l.overrides[{2, 0}] = 1.0;
  const auto back = LambdaTable::from_json(l.to_json());
  CHECK(back.at(2, 0) == 1.0);
  CHECK(back.at(1, 1) == 3.0);
  CHECK(LambdaTable::from_json(nlohmann::json(0.5)).at(4, 2) == 0.5);
  CHECK(parse_pair_key(pair_key(3, kNullCluster)) == std::make_pair(3, kNullCluster));
  CHECK(pair_key(3, kNullCluster) == "3:null");
}
