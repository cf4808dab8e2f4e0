#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cover {

using Token = std::int32_t;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// One calibration or evaluation example: a token sequence together with the
// conformity score of every prefix. prefix_scores[l-1] scores tokens[0..l).
struct ScoreTrace {
  std::string id;
  std::vector<Token> tokens;
  std::vector<double> prefix_scores;

  std::size_t length() const noexcept { return tokens.size(); }

  friend bool operator==(const ScoreTrace&, const ScoreTrace&) = default;
};

// Throws ValidationError naming the trace id when the record is malformed:
// mismatched lengths, negative token ids, or non-finite scores.
void validate(const ScoreTrace& trace);

// Random partition of N traces into a clustering part (|I_1| = floor(gamma N))
// and a proper calibration part. Both index lists are sorted ascending.
struct CalibrationSplit {
  std::vector<std::size_t> clustering;
  std::vector<std::size_t> calibration;
  double gamma = 0.0;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Quantile convention
//
// quantile(tau, A) is the k-th smallest element of A with
//   k = clamp(floor((|A| + 1) * tau), 1, |A|)
// and +infinity for an empty A. Every calibration routine in the library goes
// through this rule.
// ---------------------------------------------------------------------------

// The 1-based order index k used by quantile() for a set of size n >= 1.
std::size_t order_index(std::size_t n, double tau);

// Throws ValidationError if any value is NaN.
double quantile(double tau, std::span<const double> values);

// Same rule on values already sorted ascending (no NaN check).
double quantile_sorted(double tau, std::span<const double> sorted);

CalibrationSplit split_dataset(std::span<const ScoreTrace> traces, double gamma,
                               std::uint64_t seed);

// Copies traces[indices[i]] in order.
std::vector<ScoreTrace> select(std::span<const ScoreTrace> traces,
                               std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Trace files: one JSON object per line,
//   {"id": string, "tokens": [int...], "prefix_scores": [double...]}
// Blank lines are skipped. Duplicate ids are rejected.
// ---------------------------------------------------------------------------

std::vector<ScoreTrace> parse_traces(std::istream& in);
std::vector<ScoreTrace> load_traces(const std::filesystem::path& path);

void write_traces(std::ostream& out, std::span<const ScoreTrace> traces);
void save_traces(const std::filesystem::path& path, std::span<const ScoreTrace> traces);

nlohmann::json to_json(const ScoreTrace& trace);
ScoreTrace trace_from_json(const nlohmann::json& doc);

// Longest trace length in the collection (0 when empty).
std::size_t max_length(std::span<const ScoreTrace> traces);

// Doubles that may be infinite are written as numbers when finite and as the
// strings "inf" / "-inf" otherwise.
nlohmann::json encode_double(double value);
double decode_double(const nlohmann::json& value);

}  // namespace cover
