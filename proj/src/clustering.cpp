#include "cover/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cover/error.hpp"
#include "cover/rng.hpp"

namespace cover {

std::vector<StepBucket> bucket_steps(int max_len, int width) {
  if (width < 1) throw ValidationError("bucket_steps: width must be >= 1");
  std::vector<StepBucket> out;
  for (int first = 1; first <= max_len; first += width) {
    out.push_back({first, std::min(max_len, first + width - 1)});
  }
  return out;
}

std::vector<double> default_tau_grid() { return {0.5, 0.6, 0.7, 0.8, 0.9}; }

namespace {

void check_tau_grid(std::span<const double> tau_grid) {
  if (tau_grid.empty()) throw ValidationError("tau grid must not be empty");
  for (std::size_t i = 0; i < tau_grid.size(); ++i) {
    if (!(tau_grid[i] > 0.0 && tau_grid[i] < 1.0)) throw ValidationError("tau grid entries must lie in (0, 1)");
    if (i > 0 && !(tau_grid[i] > tau_grid[i - 1])) throw ValidationError("tau grid must be strictly increasing");
  }
}

QuantileEmbedding embed(Token token, int bucket_index, std::vector<double>& scores,
                        std::span<const double> tau_grid) {
  std::sort(scores.begin(), scores.end());
  QuantileEmbedding e;
  e.token = token;
  e.bucket = bucket_index;
  e.support = scores.size();
  for (double tau : tau_grid) e.vector.push_back(quantile_sorted(tau, scores));
  return e;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Index of the nearest centroid; ties go to the lower index.
int nearest(const std::vector<double>& p, const std::vector<std::vector<double>>& centroids, double* dist) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

std::size_t weighted_pick(std::span<const double> mass, Rng& rng) {
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (!(total > 0.0)) return uniform_index(rng, mass.size());
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    if (mass[i] <= 0.0) continue;
    last_positive = i;
    acc += mass[i];
    if (u < acc) return i;
  }
  return last_positive;
}

KMeansResult lloyd(std::span<const std::vector<double>> points, std::span<const double> weights,
                   std::vector<std::vector<double>> centroids, int max_iters) {
  const std::size_t n = points.size();
  const std::size_t dim = points[0].size();
  KMeansResult r;
  r.labels.assign(n, -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      const int c = nearest(points[i], centroids, &d);
      if (c != r.labels[i]) changed = true;
      r.labels[i] = c;
      obj += weights[i] * d;
    }
    r.iterations = it + 1;
    if (!changed) {
      r.converged = true;
      r.history.push_back(obj);
      break;
    }
    std::vector<std::vector<double>> sums(centroids.size(), std::vector<double>(dim, 0.0));
    std::vector<double> mass(centroids.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.labels[i]);
      mass[c] += weights[i];
      for (std::size_t j = 0; j < dim; ++j) sums[c][j] += weights[i] * points[i][j];
    }
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      if (mass[c] <= 0.0) continue;
      for (std::size_t j = 0; j < dim; ++j) centroids[c][j] = sums[c][j] / mass[c];
    }
    // Objective with updated centroids and the current labels.
    double after = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      after += weights[i] * sq_dist(points[i], centroids[static_cast<std::size_t>(r.labels[i])]);
    }
    r.history.push_back(after);
  }
  r.objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.objective += weights[i] * sq_dist(points[i], centroids[static_cast<std::size_t>(r.labels[i])]);
  }
  r.centroids = std::move(centroids);
  return r;
}

}  // namespace

std::optional<QuantileEmbedding> quantile_embedding(std::span<const ScoreTrace> d1, Token token,
                                                    const StepBucket& bucket, int bucket_index,
                                                    std::span<const double> tau_grid, ScoreScale scale) {
  check_tau_grid(tau_grid);
  std::vector<double> scores;
  for (const auto& t : d1) {
    for (int l = bucket.first; l <= bucket.last && static_cast<std::size_t>(l) <= t.length(); ++l) {
      const auto i = static_cast<std::size_t>(l - 1);
      if (t.tokens[i] == token) scores.push_back(scale_score(scale, t.prefix_scores[i]));
    }
  }
  if (scores.empty()) return std::nullopt;
  return embed(token, bucket_index, scores, tau_grid);
}

std::vector<QuantileEmbedding> bucket_embeddings(std::span<const ScoreTrace> d1, const StepBucket& bucket,
                                                 int bucket_index, std::span<const double> tau_grid,
                                                 ScoreScale scale) {
  check_tau_grid(tau_grid);
  std::map<Token, std::vector<double>> by_token;
  for (const auto& t : d1) {
    for (int l = bucket.first; l <= bucket.last && static_cast<std::size_t>(l) <= t.length(); ++l) {
      const auto i = static_cast<std::size_t>(l - 1);
      by_token[t.tokens[i]].push_back(scale_score(scale, t.prefix_scores[i]));
    }
  }
  std::vector<QuantileEmbedding> out;
  out.reserve(by_token.size());
  for (auto& [token, scores] : by_token) out.push_back(embed(token, bucket_index, scores, tau_grid));
  return out;
}

KMeansResult weighted_kmeans(std::span<const std::vector<double>> points, std::span<const double> weights,
                             int k, const KMeansOptions& options) {
  if (k < 1) throw ValidationError("weighted_kmeans: k must be >= 1");
  if (points.empty()) throw ValidationError("weighted_kmeans: no points");
  if (weights.size() != points.size()) throw ValidationError("weighted_kmeans: weight count mismatch");
  if (static_cast<std::size_t>(k) > points.size()) throw ValidationError("weighted_kmeans: k exceeds point count");
  const std::size_t dim = points[0].size();
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].size() != dim) throw ValidationError("weighted_kmeans: ragged points");
    if (!(weights[i] > 0.0) || !std::isfinite(weights[i])) throw ValidationError("weighted_kmeans: weights must be positive");
  }

  std::optional<KMeansResult> best;
  for (int restart = 0; restart < std::max(options.restarts, 1); ++restart) {
    Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(restart)));
    std::vector<std::vector<double>> centroids;
    centroids.push_back(points[weighted_pick(weights, rng)]);
    std::vector<double> mass(points.size());
    while (centroids.size() < static_cast<std::size_t>(k)) {
      for (std::size_t i = 0; i < points.size(); ++i) {
        double d = 0.0;
        nearest(points[i], centroids, &d);
        mass[i] = weights[i] * d;
      }
      centroids.push_back(points[weighted_pick(mass, rng)]);
    }
    auto r = lloyd(points, weights, std::move(centroids), std::max(options.max_iters, 1));
    if (!best || r.objective < best->objective) best = std::move(r);
  }
  return std::move(*best);
}

BucketClustering cluster_bucket(std::span<const QuantileEmbedding> embeddings, int clusters,
                                std::size_t min_count, std::uint64_t seed, const KMeansOptions& kmeans) {
  if (clusters < 1) throw ValidationError("cluster_bucket: M must be >= 1");
  BucketClustering out;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].support >= min_count && embeddings[i].support > 0) {
      eligible.push_back(i);
    } else {
      out.clusters[embeddings[i].token] = kNullCluster;
    }
  }
  if (eligible.empty()) {
    if (!embeddings.empty()) out.warnings.push_back("no token reaches min_count; every token is null");
    return out;
  }
  int k = clusters;
  if (eligible.size() < static_cast<std::size_t>(clusters)) {
    k = static_cast<int>(eligible.size());
    out.warnings.push_back("only " + std::to_string(eligible.size()) + " eligible tokens; M reduced from " +
                           std::to_string(clusters) + " to " + std::to_string(k));
  }
  std::vector<std::vector<double>> points;
  std::vector<double> weights;
  for (std::size_t i : eligible) {
    points.push_back(embeddings[i].vector);
    weights.push_back(std::sqrt(static_cast<double>(embeddings[i].support)));
  }
  KMeansOptions opts = kmeans;
  opts.seed = seed;
  out.kmeans = weighted_kmeans(points, weights, k, opts);

  // Renumber non-empty clusters 1..M' by ascending centroid.
  std::vector<int> used;
  for (int c = 0; c < k; ++c) {
    if (std::find(out.kmeans.labels.begin(), out.kmeans.labels.end(), c) != out.kmeans.labels.end()) used.push_back(c);
  }
  std::sort(used.begin(), used.end(), [&](int a, int b) {
    const auto& ca = out.kmeans.centroids[static_cast<std::size_t>(a)];
    const auto& cb = out.kmeans.centroids[static_cast<std::size_t>(b)];
    return ca != cb ? ca < cb : a < b;
  });
  std::vector<int> relabel(static_cast<std::size_t>(k), -1);
  for (std::size_t r = 0; r < used.size(); ++r) relabel[static_cast<std::size_t>(used[r])] = static_cast<int>(r);
  std::vector<std::vector<double>> centroids;
  for (int c : used) centroids.push_back(out.kmeans.centroids[static_cast<std::size_t>(c)]);
  for (auto& label : out.kmeans.labels) label = relabel[static_cast<std::size_t>(label)];
  out.kmeans.centroids = std::move(centroids);
  out.effective_clusters = static_cast<int>(used.size());
  for (std::size_t j = 0; j < eligible.size(); ++j) {
    out.clusters[embeddings[eligible[j]].token] = out.kmeans.labels[j] + 1;
  }
  return out;
}

AssignmentResult build_assignment(std::span<const ScoreTrace> d1, int max_len, const ClusteringOptions& options) {
  if (max_len < 1) throw ValidationError("build_assignment: max_len must be >= 1");
  if (options.clusters < 1) throw ValidationError("build_assignment: M must be >= 1");
  const auto buckets = bucket_steps(max_len, options.bucket_width);
  AssignmentResult out;
  out.assignment.clusters = options.clusters;
  out.assignment.bucket_width = options.bucket_width;
  out.assignment.max_len = max_len;
  out.assignment.buckets.resize(buckets.size());
  out.embeddings.resize(buckets.size());
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    const int bi = static_cast<int>(b);
    out.embeddings[b] = bucket_embeddings(d1, buckets[b], bi, options.tau_grid, options.scale);
    auto bc = cluster_bucket(out.embeddings[b], options.clusters, options.min_count,
                             derive_seed(options.seed, b));
    for (auto& w : bc.warnings) out.warnings.push_back("bucket " + std::to_string(b + 1) + ": " + w);
    out.assignment.buckets[b] = std::move(bc.clusters);
  }
  return out;
}

}  // namespace cover
