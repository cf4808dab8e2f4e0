#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cover/conformal_set.hpp"
#include "cover/trace.hpp"

namespace cover {

// Inclusive 1-based step range sharing one clustering and one column of
// quantile levels.
struct StepBucket {
  int first = 1;
  int last = 1;

  bool contains(int step) const noexcept { return step >= first && step <= last; }
  friend bool operator==(const StepBucket&, const StepBucket&) = default;
};

// Consecutive width-sized groups covering 1..max_len; the last may be short.
std::vector<StepBucket> bucket_steps(int max_len, int width);

std::vector<double> default_tau_grid();  // (0.5, 0.6, 0.7, 0.8, 0.9)

// Quantiles of one token's score distribution within a bucket.
struct QuantileEmbedding {
  Token token = 0;
  int bucket = 0;                 // 0-based bucket index
  std::vector<double> vector;     // one entry per tau, non-decreasing
  std::size_t support = 0;        // number of contributing (trace, step) samples
};

// Scores r^{1:l} (on `scale`) of every D1 trace whose step-l token is
// `token`, pooled over the steps of `bucket`. std::nullopt when there are no
// samples; such tokens fall into the null cluster.
std::optional<QuantileEmbedding> quantile_embedding(std::span<const ScoreTrace> d1, Token token,
                                                    const StepBucket& bucket, int bucket_index,
                                                    std::span<const double> tau_grid,
                                                    ScoreScale scale = ScoreScale::Log);

// Embeddings of every token seen in the bucket, ordered by token id.
std::vector<QuantileEmbedding> bucket_embeddings(std::span<const ScoreTrace> d1,
                                                 const StepBucket& bucket, int bucket_index,
                                                 std::span<const double> tau_grid,
                                                 ScoreScale scale = ScoreScale::Log);

struct KMeansOptions {
  int restarts = 10;
  int max_iters = 100;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<int> labels;                      // 0-based cluster per point
  std::vector<std::vector<double>> centroids;
  double objective = 0.0;                       // weighted within-cluster SSE
  std::vector<double> history;                  // objective after each Lloyd iteration (best restart)
  int iterations = 0;
  bool converged = false;
};

// Weighted Lloyd iterations from seeded weighted k-means++ starts; the
// restart with the lowest objective wins. Distance ties go to the lower
// centroid index. Empty clusters keep their previous centroid.
KMeansResult weighted_kmeans(std::span<const std::vector<double>> points,
                             std::span<const double> weights, int k, const KMeansOptions& options);

struct BucketClustering {
  std::map<Token, ClusterId> clusters;  // every embedded token, null included
  int effective_clusters = 0;
  KMeansResult kmeans;
  std::vector<std::string> warnings;
};

// Tokens with support < min_count go to null; the rest are clustered into
// at most M groups with weights sqrt(support). Clusters are renumbered 1..M'
// in ascending lexicographic order of their centroids.
BucketClustering cluster_bucket(std::span<const QuantileEmbedding> embeddings, int clusters,
                                std::size_t min_count, std::uint64_t seed,
                                const KMeansOptions& kmeans = {});

struct ClusteringOptions {
  int clusters = 4;
  std::size_t min_count = 20;
  int bucket_width = 1;
  std::vector<double> tau_grid = default_tau_grid();
  ScoreScale scale = ScoreScale::Log;
  std::uint64_t seed = 0;
};

struct AssignmentResult {
  ClusterAssignment assignment;
  std::vector<std::vector<QuantileEmbedding>> embeddings;  // per bucket
  std::vector<std::string> warnings;
};

// Runs embedding + clustering for each bucket of 1..max_len on D1.
AssignmentResult build_assignment(std::span<const ScoreTrace> d1, int max_len,
                                  const ClusteringOptions& options);

}  // namespace cover
