#include "cover/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "cover/error.hpp"
#include "cover/parallel.hpp"
#include "cover/rng.hpp"

namespace cover {

namespace {

constexpr double kSumTolerance = 1e-9;

std::string context_name(const std::vector<Token>& ctx) {
  std::string s = "[";
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(ctx[i]);
  }
  return s + "]";
}

}  // namespace

TabularARModel::TabularARModel(int vocab_size, int order, int max_len,
                               std::optional<Token> terminator, ContextTable contexts)
    : vocab_(vocab_size),
      order_(order),
      max_len_(max_len),
      terminator_(terminator),
      contexts_(std::move(contexts)) {
  if (vocab_ < 1) throw ValidationError("model: vocabulary size must be >= 1");
  if (order_ < 0) throw ValidationError("model: order must be >= 0");
  if (max_len_ < 1) throw ValidationError("model: max_len must be >= 1");
  if (terminator_ && (*terminator_ < 0 || *terminator_ >= vocab_)) {
    throw ValidationError("model: terminator outside vocabulary");
  }
  if (!contexts_.count({})) throw ValidationError("model: the empty context is required");

  for (const auto& [ctx, probs] : contexts_) {
    const std::string name = context_name(ctx);
    if (static_cast<int>(ctx.size()) > order_) {
      throw ValidationError("model: context " + name + " longer than the model order");
    }
    for (Token t : ctx) check_token(t);
    if (static_cast<int>(probs.size()) != vocab_) {
      throw ValidationError("model: context " + name + " has " + std::to_string(probs.size()) +
                            " probabilities, expected " + std::to_string(vocab_));
    }
    double sum = 0.0;
    for (double p : probs) {
      if (!std::isfinite(p) || p < 0.0) {
        throw ValidationError("model: context " + name + " has a negative or non-finite probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
      throw ValidationError("model: context " + name + " probabilities sum to " + std::to_string(sum));
    }
    if (terminator_ && !(probs[static_cast<std::size_t>(*terminator_)] > 0.0)) {
      throw ValidationError("model: context " + name + " gives the terminator zero mass");
    }
    Row row;
    row.probs = probs;
    row.log_probs.reserve(probs.size());
    for (double p : probs) row.log_probs.push_back(std::log(p));
    rows_.emplace(ctx, std::move(row));
  }
}

TabularARModel TabularARModel::uniform(int vocab_size, int max_len, std::optional<Token> terminator) {
  if (vocab_size < 1) throw ValidationError("model: vocabulary size must be >= 1");
  ContextTable table;
  table[{}] = std::vector<double>(static_cast<std::size_t>(vocab_size), 1.0 / vocab_size);
  return TabularARModel(vocab_size, 0, max_len, terminator, std::move(table));
}

void TabularARModel::check_token(Token t) const {
  if (t < 0 || t >= vocab_) {
    throw ValidationError("token " + std::to_string(t) + " outside vocabulary of size " +
                          std::to_string(vocab_));
  }
}

const TabularARModel::Row& TabularARModel::row(std::span<const Token> prefix) const {
  const std::size_t take = std::min<std::size_t>(prefix.size(), static_cast<std::size_t>(order_));
  std::vector<Token> ctx(prefix.end() - static_cast<std::ptrdiff_t>(take), prefix.end());
  for (;;) {
    if (auto it = rows_.find(ctx); it != rows_.end()) return it->second;
    ctx.erase(ctx.begin());  // back off; terminates at the required empty context
  }
}

const std::vector<double>& TabularARModel::conditional(std::span<const Token> prefix) const {
  return row(prefix).probs;
}

double TabularARModel::log_score(std::span<const Token> prefix) const {
  double total = 0.0;
  for (std::size_t k = 0; k < prefix.size(); ++k) {
    check_token(prefix[k]);
    total += row(prefix.first(k)).log_probs[static_cast<std::size_t>(prefix[k])];
  }
  return total;
}

double TabularARModel::sequence_score(std::span<const Token> prefix) const {
  if (prefix.empty()) throw ValidationError("sequence_score: empty prefix");
  if (static_cast<int>(prefix.size()) > max_len_) {
    throw ValidationError("sequence_score: prefix longer than max_len " + std::to_string(max_len_));
  }
  return std::exp(log_score(prefix));
}

std::vector<double> TabularARModel::next_token_scores(std::span<const Token> prefix) const {
  if (static_cast<int>(prefix.size()) >= max_len_) {
    throw ValidationError("next_token_scores: prefix already at max_len");
  }
  const double base = log_score(prefix);
  const auto& logs = row(prefix).log_probs;
  std::vector<double> out(logs.size());
  for (std::size_t a = 0; a < logs.size(); ++a) out[a] = std::exp(base + logs[a]);
  return out;
}

nlohmann::json TabularARModel::to_json() const {
  nlohmann::json contexts = nlohmann::json::array();
  for (const auto& [ctx, probs] : contexts_) contexts.push_back({{"ctx", ctx}, {"probs", probs}});
  nlohmann::json doc{{"V", vocab_}, {"order", order_}, {"L", max_len_}, {"contexts", contexts}};
  doc["terminator"] = terminator_ ? nlohmann::json(*terminator_) : nlohmann::json(nullptr);
  return doc;
}

TabularARModel TabularARModel::from_json(const nlohmann::json& doc) {
  try {
    std::optional<Token> term;
    if (doc.contains("terminator") && !doc["terminator"].is_null()) term = doc["terminator"].get<Token>();
    ContextTable table;
    for (const auto& entry : doc.at("contexts")) {
      auto ctx = entry.at("ctx").get<std::vector<Token>>();
      if (!table.emplace(ctx, entry.at("probs").get<std::vector<double>>()).second) {
        throw ValidationError("model: duplicate context " + context_name(ctx));
      }
    }
    return TabularARModel(doc.at("V").get<int>(), doc.at("order").get<int>(), doc.at("L").get<int>(),
                          term, std::move(table));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model document: ") + e.what());
  }
}

void TabularARModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

TabularARModel TabularARModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open model file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return from_json(doc);
}

// ---------------------------------------------------------------------------

TraceScorer::TraceScorer(ScoreTrace trace, int vocab_size, int max_len,
                         std::optional<Token> terminator)
    : trace_(std::move(trace)), vocab_(vocab_size), max_len_(max_len), terminator_(terminator) {
  validate(trace_);
}

double TraceScorer::sequence_score(std::span<const Token> prefix) const {
  if (prefix.empty()) throw ValidationError("sequence_score: empty prefix");
  if (static_cast<int>(prefix.size()) > max_len_) {
    throw ValidationError("sequence_score: prefix longer than max_len");
  }
  if (prefix.size() > trace_.length() ||
      !std::equal(prefix.begin(), prefix.end(), trace_.tokens.begin())) {
    throw UnsupportedOperation("trace '" + trace_.id + "' has no score for this prefix");
  }
  return trace_.prefix_scores[prefix.size() - 1];
}

std::vector<double> TraceScorer::next_token_scores(std::span<const Token>) const {
  throw UnsupportedOperation("trace-backed scorer cannot expand prefixes");
}

// ---------------------------------------------------------------------------

nlohmann::json LongTailConfig::to_json() const {
  nlohmann::json doc{{"V", vocab_size}, {"order", order},           {"L", max_len},
                     {"head_tokens", head_tokens}, {"tail_tokens", tail_tokens},
                     {"tail_mass", tail_mass},     {"noise", noise}, {"seed", seed}};
  doc["terminator"] = terminator ? nlohmann::json(*terminator) : nlohmann::json(nullptr);
  return doc;
}

LongTailConfig LongTailConfig::from_json(const nlohmann::json& doc) {
  try {
    LongTailConfig c;
    c.vocab_size = doc.at("V").get<int>();
    c.order = doc.value("order", 1);
    c.max_len = doc.at("L").get<int>();
    c.head_tokens = doc.at("head_tokens").get<std::set<Token>>();
    c.tail_tokens = doc.at("tail_tokens").get<std::set<Token>>();
    c.tail_mass = doc.at("tail_mass").get<double>();
    c.noise = doc.value("noise", 0.0);
    c.seed = doc.value("seed", std::uint64_t{0});
    if (doc.contains("terminator") && !doc["terminator"].is_null()) c.terminator = doc["terminator"].get<Token>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("long-tail config: ") + e.what());
  }
}

void validate(const LongTailConfig& c) {
  if (c.vocab_size < 2) throw ValidationError("long-tail config: V must be >= 2");
  if (c.order < 0) throw ValidationError("long-tail config: order must be >= 0");
  if (c.max_len < 1) throw ValidationError("long-tail config: L must be >= 1");
  if (c.head_tokens.empty() || c.tail_tokens.empty()) {
    throw ValidationError("long-tail config: head and tail token sets must be non-empty");
  }
  for (const auto* group : {&c.head_tokens, &c.tail_tokens}) {
    for (Token t : *group) {
      if (t < 0 || t >= c.vocab_size) throw ValidationError("long-tail config: token outside vocabulary");
    }
  }
  for (Token t : c.head_tokens) {
    if (c.tail_tokens.count(t)) throw ValidationError("long-tail config: head and tail overlap");
  }
  if (!(c.tail_mass > 0.0 && c.tail_mass < 0.5)) {
    throw ValidationError("long-tail config: tail_mass must lie in (0, 0.5)");
  }
  if (!(c.noise >= 0.0 && c.noise < 1.0)) throw ValidationError("long-tail config: noise must lie in [0, 1)");
  if (c.terminator && !c.head_tokens.count(*c.terminator)) {
    throw ValidationError("long-tail config: terminator must be a head token");
  }
  // Smallest possible head share against the largest possible tail share.
  const double nh = static_cast<double>(c.head_tokens.size());
  const double nt = static_cast<double>(c.tail_tokens.size());
  const double lo = 1.0 - c.noise;
  const double hi = 1.0 + c.noise;
  const double min_head = (1.0 - c.tail_mass) * lo / (lo + (nh - 1.0) * hi);
  const double max_tail = c.tail_mass * hi / (hi + (nt - 1.0) * lo);
  if (min_head < max_tail) {
    throw ValidationError("long-tail config: noise too large for head tokens to dominate tail tokens");
  }
}

TabularARModel make_longtail_model(const LongTailConfig& c) {
  validate(c);
  // Contexts are all sequences of length 0..order over non-terminator tokens.
  std::vector<Token> alphabet;
  for (Token t = 0; t < c.vocab_size; ++t) {
    if (!c.terminator || t != *c.terminator) alphabet.push_back(t);
  }
  std::vector<std::vector<Token>> contexts{{}};
  std::vector<std::vector<Token>> frontier{{}};
  for (int len = 1; len <= c.order; ++len) {
    std::vector<std::vector<Token>> next;
    for (const auto& ctx : frontier) {
      for (Token t : alphabet) {
        auto grown = ctx;
        grown.push_back(t);
        next.push_back(std::move(grown));
      }
    }
    contexts.insert(contexts.end(), next.begin(), next.end());
    frontier = std::move(next);
  }

  TabularARModel::ContextTable table;
  for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
    Rng rng(derive_seed(c.seed, ci));
    std::vector<double> probs(static_cast<std::size_t>(c.vocab_size), 0.0);
    auto fill = [&](const std::set<Token>& group, double mass) {
      std::vector<double> w;
      w.reserve(group.size());
      for (std::size_t i = 0; i < group.size(); ++i) w.push_back(1.0 + c.noise * (2.0 * uniform01(rng) - 1.0));
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      std::size_t i = 0;
      for (Token t : group) probs[static_cast<std::size_t>(t)] = mass * w[i++] / total;
    };
    fill(c.head_tokens, 1.0 - c.tail_mass);
    fill(c.tail_tokens, c.tail_mass);
    table.emplace(contexts[ci], std::move(probs));
  }
  return TabularARModel(c.vocab_size, c.order, c.max_len, c.terminator, std::move(table));
}

std::vector<ScoreTrace> sample_dataset(const TabularARModel& model, std::size_t n,
                                       std::uint64_t seed, int threads) {
  if (n < 1) throw ValidationError("sample_dataset: n must be >= 1");
  std::vector<ScoreTrace> out(n);
  const auto term = model.terminator();
  parallel_for(n, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    ScoreTrace& trace = out[i];
    trace.id = "s" + std::to_string(seed) + "-" + std::to_string(i);
    double log_total = 0.0;
    for (int l = 0; l < model.max_len(); ++l) {
      const auto& probs = model.conditional(trace.tokens);
      const double u = uniform01(rng);
      double cdf = 0.0;
      Token pick = -1;
      for (std::size_t a = 0; a < probs.size(); ++a) {
        if (probs[a] <= 0.0) continue;
        pick = static_cast<Token>(a);
        cdf += probs[a];
        if (u < cdf) break;
      }
      // Same accumulation order as TabularARModel::log_score.
      log_total += std::log(probs[static_cast<std::size_t>(pick)]);
      trace.tokens.push_back(pick);
      trace.prefix_scores.push_back(std::exp(log_total));
      if (term && pick == *term) break;
    }
  });
  return out;
}

}  // namespace cover
