#pragma once

// Agglomerative clustering of a recording's segments.
//
// By-the-book AHC greedily merges the pair of clusters whose merge most
// increases the total clustering log-likelihood, scoring clusters from pooled
// statistics. The baseline is unweighted average linkage (UPGMA) on plug-in
// pairwise log-likelihood ratios, stopped at a per-recording threshold found
// by unsupervised calibration.
//
// Both variants first record the full merge sequence (a MergeTrace), which
// does not depend on the stopping threshold; cutting the trace at a threshold
// then yields the labels. Threshold sweeps reuse one trace.

#include <span>
#include <string>
#include <vector>

#include "pdiar/partitions.hpp"
#include "pdiar/plda.hpp"

namespace pdiar {

enum class AhcMode { Baseline, ByTheBook };

std::string to_string(AhcMode mode);
/// Accepts "baseline" and "book"; throws DomainError otherwise.
AhcMode parse_ahc_mode(const std::string& text);

struct AhcConfig {
  AhcMode mode = AhcMode::ByTheBook;
  double sigma = 0.0;             ///< stopping threshold (an offset on calibrated scores for the baseline)
  double likelihood_scale = 1.0;  ///< multiplies every segment's statistics

  /// Throws DomainError on NaN sigma or likelihood_scale <= 0. Infinite sigma is allowed.
  void validate() const;
};

/// Log-likelihood gain of merging two clusters.
template <typename Scalar>
Scalar merge_delta(const ClusterStats<Scalar>& i, const ClusterStats<Scalar>& j) {
  if (i.a_bar.size() != j.a_bar.size()) throw ShapeError("merge_delta: dimension mismatch");
  return cluster_loglik(i + j) - cluster_loglik(i) - cluster_loglik(j);
}

/// Active clusters of a recording with their pooled statistics. Cluster ids are
/// the index of the cluster's first segment; merging keeps the lower id.
class ClusterState {
 public:
  ClusterState(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, double scale);

  int size() const { return static_cast<int>(members_.size()); }
  bool active(int id) const { return !members_[static_cast<std::size_t>(id)].empty(); }
  const ClusterStatsd& stats(int id) const { return stats_[static_cast<std::size_t>(id)]; }
  const std::vector<int>& members(int id) const { return members_[static_cast<std::size_t>(id)]; }
  int num_active() const { return num_active_; }

  /// Merges cluster `b` into cluster `a` (a < b) by adding statistics.
  void merge(int a, int b);
  /// Sum of cluster_loglik over active clusters.
  double total_loglik() const;
  /// Canonical labels of the current partition.
  LabelString labels() const;

 private:
  std::vector<ClusterStatsd> stats_;
  std::vector<std::vector<int>> members_;
  int num_active_ = 0;
};

struct Merge {
  int keep = 0;      ///< surviving cluster id (the lower one)
  int absorbed = 0;  ///< cluster id merged into `keep`
  double score = 0.0;  ///< merge gain (book) or average-linkage similarity (baseline)
};

struct MergeTrace {
  int n = 0;  ///< number of segments
  std::vector<Merge> merges;  ///< in order, down to a single cluster
};

/// Applies merges in order while their score passes the threshold: score >
/// threshold when `strict`, score >= threshold otherwise. Stops at the first
/// failing merge.
LabelString cut(const MergeTrace& trace, double threshold, bool strict);

/// Greedy maximum-likelihood merge sequence. Ties go to the lexicographically
/// smallest cluster-id pair.
MergeTrace by_the_book_trace(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                             double likelihood_scale = 1.0);

/// Plug-in pairwise log-likelihood ratios (precisions replaced by +inf), with
/// each segment's statistics scaled by `likelihood_scale`.
Eigen::MatrixXd plug_in_scores(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                               double likelihood_scale = 1.0);

/// UPGMA merge sequence on a symmetric similarity matrix: the similarity of
/// two clusters is the mean over all segment pairs across them, so a merged
/// row is the size-weighted mean of its parents' rows.
MergeTrace average_linkage_trace(const Eigen::MatrixXd& similarity);

/// Two-component, shared-variance Gaussian mixture fitted by EM to the
/// scores; returns the score where both components have posterior 1/2.
/// Throws CalibrationError on fewer than two scores or zero spread.
double unsupervised_calibration(std::span<const double> scores);

/// The baseline's per-recording threshold: calibration of the upper triangle
/// of `similarity`, or 0 when there are fewer than two pairs.
double baseline_threshold(const Eigen::MatrixXd& similarity);

LabelString ahc_by_the_book(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                            const AhcConfig& cfg);
LabelString ahc_baseline(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, const AhcConfig& cfg);

/// Dispatches on cfg.mode.
LabelString diarize_embeddings(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                               const AhcConfig& cfg);

}  // namespace pdiar
