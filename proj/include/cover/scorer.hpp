#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include <json.hpp>

#include "cover/trace.hpp"

namespace cover {

// Source of conformity scores for prefixes. Higher means more conforming.
// Implementations must be safe to call concurrently.
class Scorer {
 public:
  virtual ~Scorer() = default;

  virtual int vocab_size() const = 0;
  virtual int max_len() const = 0;
  virtual std::optional<Token> terminator() const = 0;

  // Trace-backed scorers only know the scores of recorded prefixes.
  virtual bool supports_expansion() const = 0;

  // Score of a non-empty prefix of length <= max_len().
  virtual double sequence_score(std::span<const Token> prefix) const = 0;

  // Entry a is sequence_score(prefix + a). Requires supports_expansion() and
  // prefix.size() < max_len().
  virtual std::vector<double> next_token_scores(std::span<const Token> prefix) const = 0;
};

// Markov model of order k over a vocabulary of size V. The next-token
// distribution is looked up from the last min(k, len) tokens; missing
// contexts back off to their longest stored suffix (the empty context must
// exist). Scores are products of conditional probabilities accumulated in
// log space.
class TabularARModel final : public Scorer {
 public:
  using ContextTable = std::map<std::vector<Token>, std::vector<double>>;

  TabularARModel(int vocab_size, int order, int max_len, std::optional<Token> terminator,
                 ContextTable contexts);

  // Every context maps to the uniform distribution.
  static TabularARModel uniform(int vocab_size, int max_len, std::optional<Token> terminator);

  int vocab_size() const override { return vocab_; }
  int max_len() const override { return max_len_; }
  std::optional<Token> terminator() const override { return terminator_; }
  bool supports_expansion() const override { return true; }
  int order() const noexcept { return order_; }

  double sequence_score(std::span<const Token> prefix) const override;
  std::vector<double> next_token_scores(std::span<const Token> prefix) const override;

  // p(. | prefix) for the context selected by `prefix`.
  const std::vector<double>& conditional(std::span<const Token> prefix) const;

  // sum_k log p(prefix[k] | prefix[0..k)), accumulated left to right.
  double log_score(std::span<const Token> prefix) const;

  const ContextTable& contexts() const noexcept { return contexts_; }

  nlohmann::json to_json() const;
  static TabularARModel from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static TabularARModel load(const std::filesystem::path& path);

 private:
  struct Row {
    std::vector<double> probs;
    std::vector<double> log_probs;
  };
  const Row& row(std::span<const Token> prefix) const;
  void check_token(Token t) const;

  int vocab_;
  int order_;
  int max_len_;
  std::optional<Token> terminator_;
  ContextTable contexts_;
  std::map<std::vector<Token>, Row> rows_;
};

// Scorer that answers from one recorded trace. It cannot expand.
class TraceScorer final : public Scorer {
 public:
  TraceScorer(ScoreTrace trace, int vocab_size, int max_len,
              std::optional<Token> terminator = std::nullopt);

  int vocab_size() const override { return vocab_; }
  int max_len() const override { return max_len_; }
  std::optional<Token> terminator() const override { return terminator_; }
  bool supports_expansion() const override { return false; }
  double sequence_score(std::span<const Token> prefix) const override;
  std::vector<double> next_token_scores(std::span<const Token> prefix) const override;

 private:
  ScoreTrace trace_;
  int vocab_;
  int max_len_;
  std::optional<Token> terminator_;
};

// Head/tail vocabulary split for the synthetic long-tail generator. In every
// context the tail tokens share tail_mass and the head tokens share the rest;
// within each group weights are 1 + noise * u with u uniform in [-1, 1).
// Tokens in neither group get probability zero. The terminator, when set,
// must be a head token.
struct LongTailConfig {
  int vocab_size = 20;
  int order = 1;
  int max_len = 8;
  std::set<Token> head_tokens;
  std::set<Token> tail_tokens;
  double tail_mass = 0.1;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::optional<Token> terminator;

  nlohmann::json to_json() const;
  static LongTailConfig from_json(const nlohmann::json& doc);
};

// Throws ValidationError when the config invariants fail, including the
// worst-case guarantee that every head probability is at least every tail
// probability.
void validate(const LongTailConfig& config);

TabularARModel make_longtail_model(const LongTailConfig& config);

// Samples n traces autoregressively until the terminator or max_len.
// Trace i uses its own stream derived from (seed, i) and is named
// "s<seed>-<i>", so the output does not depend on `threads`.
std::vector<ScoreTrace> sample_dataset(const TabularARModel& model, std::size_t n,
                                       std::uint64_t seed, int threads = 1);

}  // namespace cover
