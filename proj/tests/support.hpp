#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "cover/conformal_set.hpp"
#include "cover/rng.hpp"
#include "cover/scorer.hpp"
#include "cover/trace.hpp"

namespace testing {

using cover::Token;

// k-th smallest by full sort, k = clamp(floor((n + 1) tau), 1, n).
inline double sort_quantile(double tau, std::vector<double> values) {
  if (values.empty()) return cover::kInfinity;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double k = std::floor((n + 1.0) * tau);
  k = std::max(1.0, std::min(k, n));
  return values[static_cast<std::size_t>(k) - 1];
}

// A dense random table over all contexts up to `order`, with its own copy
// for oracles that must not go through the model's lookups.
struct RandomModel {
  cover::TabularARModel::ContextTable table;
  int vocab = 0;
  int order = 0;
  int max_len = 0;
  std::optional<Token> terminator;

  cover::TabularARModel build() const { return cover::TabularARModel(vocab, order, max_len, terminator, table); }

  const std::vector<double>& probs(const std::vector<Token>& prefix) const {
    const std::size_t k = std::min<std::size_t>(prefix.size(), static_cast<std::size_t>(order));
    return table.at(std::vector<Token>(prefix.end() - static_cast<std::ptrdiff_t>(k), prefix.end()));
  }

  double score(const std::vector<Token>& seq) const {
    double p = 1.0;
    std::vector<Token> prefix;
    for (Token t : seq) {
      p *= probs(prefix)[static_cast<std::size_t>(t)];
      prefix.push_back(t);
    }
    return p;
  }
};

inline void all_contexts(int vocab, int len, std::vector<Token>& cur, const std::function<void()>& fn) {
  if (static_cast<int>(cur.size()) == len) {
    fn();
    return;
  }
  for (Token t = 0; t < vocab; ++t) {
    cur.push_back(t);
    all_contexts(vocab, len, cur, fn);
    cur.pop_back();
  }
}

inline RandomModel random_model(int vocab, int order, int max_len, std::optional<Token> terminator,
                                std::uint64_t seed) {
  RandomModel m;
  m.vocab = vocab;
  m.order = order;
  m.max_len = max_len;
  m.terminator = terminator;
  cover::Rng rng(seed);
  for (int len = 0; len <= order; ++len) {
    std::vector<Token> cur;
    all_contexts(vocab, len, cur, [&] {
      std::vector<double> p(static_cast<std::size_t>(vocab));
      double total = 0.0;
      for (auto& x : p) {
        x = 0.05 + cover::uniform01(rng);
        total += x;
      }
      for (auto& x : p) x /= total;
      m.table[cur] = p;
    });
  }
  return m;
}

// Every sequence of length 1..max_len over the vocabulary that is complete:
// it either ends in the terminator (and contains no earlier terminator) or
// has length max_len without one.
inline std::vector<std::vector<Token>> complete_sequences(int vocab, int max_len, std::optional<Token> terminator) {
  std::vector<std::vector<Token>> out;
  std::vector<Token> cur;
  std::function<void()> rec = [&] {
    for (Token t = 0; t < vocab; ++t) {
      cur.push_back(t);
      const bool ends = terminator && t == *terminator;
      if (ends || static_cast<int>(cur.size()) == max_len) {
        out.push_back(cur);
      } else {
        rec();
      }
      cur.pop_back();
    }
  };
  rec();
  std::sort(out.begin(), out.end());
  return out;
}

// Traces with random tokens and non-increasing random prefix scores.
inline std::vector<cover::ScoreTrace> random_traces(std::size_t n, int vocab, int max_len, std::uint64_t seed,
                                                    bool variable_length = true) {
  cover::Rng rng(seed);
  std::vector<cover::ScoreTrace> out;
  for (std::size_t i = 0; i < n; ++i) {
    cover::ScoreTrace t;
    t.id = "r" + std::to_string(seed) + "-" + std::to_string(i);
    const int len = variable_length ? 1 + static_cast<int>(cover::uniform_index(rng, static_cast<std::uint64_t>(max_len)))
                                    : max_len;
    double s = 1.0;
    for (int l = 0; l < len; ++l) {
      t.tokens.push_back(static_cast<Token>(cover::uniform_index(rng, static_cast<std::uint64_t>(vocab))));
      s *= 0.05 + 0.95 * cover::uniform01(rng);
      t.prefix_scores.push_back(s);
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Every token of every bucket mapped uniformly to 0..M.
inline cover::ClusterAssignment random_assignment(int V, int M, int W, int L, std::uint64_t seed) {
  cover::Rng rng(seed);
  cover::ClusterAssignment a;
  a.clusters = M;
  a.bucket_width = W;
  a.max_len = L;
  a.buckets.resize(static_cast<std::size_t>((L + W - 1) / W));
  for (auto& b : a.buckets) {
    for (Token t = 0; t < V; ++t) b[t] = static_cast<cover::ClusterId>(cover::uniform_index(rng, static_cast<std::uint64_t>(M + 1)));
  }
  return a;
}

}  // namespace testing
