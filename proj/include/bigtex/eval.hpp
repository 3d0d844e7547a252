#pragma once

// Downstream evaluation of learned embeddings: classification accuracy,
// link-prediction AUC, K-Means clustering with chance-adjusted agreement
// scores, and a 2D PCA projection for external plotting. Everything here is
// a pure function of its inputs and seed.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bigtex/errors.hpp"
#include "bigtex/graph.hpp"

namespace bigtex {

struct EvalReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::size_t node_count = 0;
  std::string config_hash;
  std::uint64_t seed = 0;

  /// Rejects metric values outside their mathematical ranges.
  void validate() const;
  std::string to_json() const;
};

/// Fraction of masked nodes whose prediction matches the label.
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                const std::vector<std::size_t>& mask);

/// AUC from raw scores via the rank statistic; ties count one half.
double auc_from_scores(const std::vector<double>& positive,
                       const std::vector<double>& negative);

/// Link prediction AUC with dot-product scoring of the embedding rows.
double link_auc(const std::vector<float>& embeddings, std::size_t dim,
                const LinkSplit& split);

struct KMeansResult {
  std::vector<int> assignments;
  std::vector<double> centroids;      // k x d
  double wcss = 0;                    // within-cluster sum of squares
  std::vector<double> wcss_history;   // per Lloyd iteration, best restart
};

/// k-means++ seeding, Lloyd iterations to an assignment fixpoint, best of
/// `restarts` by WCSS. Empty clusters are re-seeded to the farthest point.
KMeansResult kmeans(const std::vector<double>& points, std::size_t n, std::size_t d,
                    std::size_t k, std::size_t restarts, std::size_t max_iter,
                    std::uint64_t seed);

/// Hubert-Arabie adjusted Rand index from the contingency table.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Mutual information normalized by the geometric mean of the entropies.
/// Identical partitions score 1 (including the all-one-cluster pair); when
/// exactly one side has zero entropy the score is 0.
double normalized_mutual_info(const std::vector<int>& a, const std::vector<int>& b);

struct Projection2D {
  std::vector<double> coords;  // n x 2
  double eigenvalues[2] = {0, 0};
  double total_variance = 0;   // trace of the centered Gram matrix
  bool degenerate = false;     // rank-0 input, coordinates all zero
};

/// Top-2 principal components via power iteration on the centered Gram
/// matrix.
Projection2D project_2d(const std::vector<double>& points, std::size_t n,
                        std::size_t d);

/// Up to `per_class_cap` node ids per class (unlabeled nodes skipped),
/// seeded shuffle within each class.
std::vector<std::size_t> sample_per_class(const std::vector<int>& labels,
                                          std::size_t per_class_cap,
                                          std::uint64_t seed);

/// CSV rows `node_id,x,y,label` for external plotting.
void write_projection_csv(const std::string& path, const Projection2D& proj,
                          const std::vector<std::size_t>& node_ids,
                          const std::vector<int>& labels);

}  // namespace bigtex
