#include "cover/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <unordered_set>

#include "cover/error.hpp"
#include "cover/rng.hpp"

namespace cover {

void validate(const ScoreTrace& trace) {
  if (trace.tokens.size() != trace.prefix_scores.size()) {
    throw ValidationError("trace '" + trace.id + "': " + std::to_string(trace.tokens.size()) +
                          " tokens but " + std::to_string(trace.prefix_scores.size()) +
                          " prefix scores");
  }
  for (Token t : trace.tokens) {
    if (t < 0) throw ValidationError("trace '" + trace.id + "': negative token id");
  }
  for (double s : trace.prefix_scores) {
    if (!std::isfinite(s)) throw ValidationError("trace '" + trace.id + "': non-finite score");
  }
}

std::size_t order_index(std::size_t n, double tau) {
  if (n == 0) throw ValidationError("order_index: empty set");
  const double raw = std::floor((static_cast<double>(n) + 1.0) * tau);
  if (!(raw >= 1.0)) return 1;  // also catches NaN
  if (raw >= static_cast<double>(n)) return n;
  return static_cast<std::size_t>(raw);
}

double quantile_sorted(double tau, std::span<const double> sorted) {
  if (sorted.empty()) return kInfinity;
  return sorted[order_index(sorted.size(), tau) - 1];
}

double quantile(double tau, std::span<const double> values) {
  if (std::isnan(tau)) throw ValidationError("quantile: tau is NaN");
  if (values.empty()) return kInfinity;
  if (std::any_of(values.begin(), values.end(), [](double v) { return std::isnan(v); })) {
    throw ValidationError("quantile: NaN in values");
  }
  std::vector<double> work(values.begin(), values.end());
  const std::size_t k = order_index(work.size(), tau);
  std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(k - 1), work.end());
  return work[k - 1];
}

CalibrationSplit split_dataset(std::span<const ScoreTrace> traces, double gamma,
                               std::uint64_t seed) {
  if (traces.empty()) throw ValidationError("split_dataset: no traces");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("split_dataset: gamma outside [0,1]");

  const std::size_t n = traces.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5b117));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  }
  const auto n1 = std::min(n, static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n) + 1e-9)));

  CalibrationSplit split;
  split.gamma = gamma;
  split.seed = seed;
  split.clustering.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n1));
  split.calibration.assign(perm.begin() + static_cast<std::ptrdiff_t>(n1), perm.end());
  std::sort(split.clustering.begin(), split.clustering.end());
  std::sort(split.calibration.begin(), split.calibration.end());
  return split;
}

std::vector<ScoreTrace> select(std::span<const ScoreTrace> traces,
                               std::span<const std::size_t> indices) {
  std::vector<ScoreTrace> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(traces[i]);
  return out;
}

nlohmann::json to_json(const ScoreTrace& trace) {
  return nlohmann::json{{"id", trace.id}, {"tokens", trace.tokens}, {"prefix_scores", trace.prefix_scores}};
}

ScoreTrace trace_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("trace record is not an object");
  for (const char* key : {"id", "tokens", "prefix_scores"}) {
    if (!doc.contains(key)) throw ValidationError(std::string("trace record missing '") + key + "'");
  }
  if (!doc["id"].is_string()) throw ValidationError("trace 'id' must be a string");
  ScoreTrace trace;
  trace.id = doc["id"].get<std::string>();
  const auto& tokens = doc["tokens"];
  const auto& scores = doc["prefix_scores"];
  if (!tokens.is_array() || !scores.is_array()) {
    throw ValidationError("trace '" + trace.id + "': tokens and prefix_scores must be arrays");
  }
  for (const auto& t : tokens) {
    if (!t.is_number_integer()) throw ValidationError("trace '" + trace.id + "': non-integer token");
    trace.tokens.push_back(t.get<Token>());
  }
  for (const auto& s : scores) {
    if (!s.is_number()) throw ValidationError("trace '" + trace.id + "': non-numeric score");
    trace.prefix_scores.push_back(s.get<double>());
  }
  validate(trace);
  return trace;
}

std::vector<ScoreTrace> parse_traces(std::istream& in) {
  std::vector<ScoreTrace> traces;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    ScoreTrace trace;
    try {
      trace = trace_from_json(doc);
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
    if (!ids.insert(trace.id).second) throw ParseError(line_no, "duplicate trace id '" + trace.id + "'");
    traces.push_back(std::move(trace));
  }
  return traces;
}

std::vector<ScoreTrace> load_traces(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open trace file " + path.string());
  return parse_traces(in);
}

void write_traces(std::ostream& out, std::span<const ScoreTrace> traces) {
  for (const auto& t : traces) out << to_json(t).dump() << '\n';
}

void save_traces(const std::filesystem::path& path, std::span<const ScoreTrace> traces) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_traces(out, traces);
  if (!out) throw Error("write failed: " + path.string());
}

std::size_t max_length(std::span<const ScoreTrace> traces) {
  std::size_t m = 0;
  for (const auto& t : traces) m = std::max(m, t.length());
  return m;
}

nlohmann::json encode_double(double value) {
  if (std::isfinite(value)) return value;
  if (std::isnan(value)) return "nan";
  return value > 0 ? "inf" : "-inf";
}

double decode_double(const nlohmann::json& value) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) {
    const auto s = value.get<std::string>();
    if (s == "inf") return kInfinity;
    if (s == "-inf") return -kInfinity;
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ValidationError("expected a number or \"inf\"/\"-inf\", got " + value.dump());
}

}  // namespace cover
