#pragma once

// Diagonalized two-covariance PLDA for probabilistic embeddings.
//
// After joint diagonalization the speaker variable is y ~ N(0, I) and the
// within-speaker precision is diag(w). A probabilistic embedding contributes
// the likelihood exp[e (x y - y^2 / 2)] per dimension with weight
// e = w b / (w + b), so a cluster is summarized by pooled sums
//   a = sum_t e_t x_t,  b = sum_t e_t
// and scores 1/2 sum_j (a_j^2 / (1 + b_j) - log(1 + b_j)) up to a constant
// that does not depend on the clustering (taken to be 0 everywhere).

#include <cmath>
#include <limits>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "pdiar/errors.hpp"
#include "pdiar/partitions.hpp"

namespace pdiar {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Mean and diagonal precision of a Gaussian likelihood over the hidden
/// embedding. A precision of +inf means "exact" (plug-in scoring), 0 means the
/// component carries no information.
template <typename Scalar>
struct ProbEmbedding {
  Vec<Scalar> xhat;
  Vec<Scalar> prec;

  Eigen::Index dim() const { return xhat.size(); }
};

template <typename Scalar>
struct DiagPlda {
  Vec<Scalar> w;  ///< diagonal within-speaker precision

  Eigen::Index dim() const { return w.size(); }

  void validate() const {
    if (w.size() == 0) throw ShapeError("DiagPlda has zero dimensions");
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      if (!(std::isfinite(static_cast<double>(w(j))) && w(j) > Scalar(0))) {
        throw DomainError("DiagPlda: within precision must be finite and > 0");
      }
    }
  }
};

/// Pooled statistics of one cluster. Merging clusters adds their statistics.
template <typename Scalar>
struct ClusterStats {
  Vec<Scalar> a_bar;
  Vec<Scalar> b_bar;
  int count = 0;

  static ClusterStats zero(Eigen::Index dim) {
    return {Vec<Scalar>::Zero(dim), Vec<Scalar>::Zero(dim), 0};
  }

  ClusterStats& operator+=(const ClusterStats& other) {
    if (other.a_bar.size() != a_bar.size()) throw ShapeError("ClusterStats: dimension mismatch");
    a_bar += other.a_bar;
    b_bar += other.b_bar;
    count += other.count;
    return *this;
  }

  friend ClusterStats operator+(ClusterStats lhs, const ClusterStats& rhs) { return lhs += rhs; }
};

/// Untransformed two-covariance model: between-speaker covariance V V' and
/// within-speaker covariance W^-1.
template <typename Scalar>
struct FullPlda {
  Mat<Scalar> between_cov;
  Mat<Scalar> within_cov;
};

using ProbEmbeddingd = ProbEmbedding<double>;
using DiagPldad = DiagPlda<double>;
using ClusterStatsd = ClusterStats<double>;
using FullPldad = FullPlda<double>;

template <typename Scalar>
void check_embedding(const ProbEmbedding<Scalar>& e, Eigen::Index dim) {
  if (e.xhat.size() != dim || e.prec.size() != dim) {
    throw ShapeError("embedding dimension " + std::to_string(e.xhat.size()) + "/" +
                     std::to_string(e.prec.size()) + " does not match model dimension " +
                     std::to_string(dim));
  }
}

/// e = w b / (w + b), computed as w / (1 + w / b) so that b = 0 gives 0 and
/// b = inf gives w.
template <typename Scalar, typename Derived>
Vec<Scalar> segment_weight(const DiagPlda<Scalar>& plda, const Eigen::MatrixBase<Derived>& prec) {
  if (prec.size() != plda.dim()) throw ShapeError("segment_weight: dimension mismatch");
  return plda.w.array() / (Scalar(1) + plda.w.array() / prec.derived().array());
}

/// Pooled statistics of `embeddings`. Each segment's contribution is
/// multiplied by `scale` before summation.
template <typename Scalar>
ClusterStats<Scalar> accumulate(std::span<const ProbEmbedding<Scalar>> embeddings,
                                const DiagPlda<Scalar>& plda, Scalar scale = Scalar(1)) {
  auto stats = ClusterStats<Scalar>::zero(plda.dim());
  for (const auto& e : embeddings) {
    check_embedding(e, plda.dim());
    const Vec<Scalar> weight = scale * segment_weight(plda, e.prec);
    stats.a_bar.array() += weight.array() * e.xhat.array();
    stats.b_bar += weight;
    ++stats.count;
  }
  return stats;
}

template <typename Scalar>
ClusterStats<Scalar> accumulate(const std::vector<ProbEmbedding<Scalar>>& embeddings,
                                const DiagPlda<Scalar>& plda, Scalar scale = Scalar(1)) {
  return accumulate(std::span<const ProbEmbedding<Scalar>>(embeddings), plda, scale);
}

template <typename Scalar>
Scalar cluster_loglik(const ClusterStats<Scalar>& stats) {
  using std::log1p;
  Scalar ll(0);
  for (Eigen::Index j = 0; j < stats.a_bar.size(); ++j) {
    const Scalar a = stats.a_bar(j);
    const Scalar b = stats.b_bar(j);
    ll += a * a / (Scalar(1) + b) - log1p(b);
  }
  return ll / Scalar(2);
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = v.maxCoeff();
  if (!std::isfinite(static_cast<double>(m))) return m;
  using std::exp;
  using std::log;
  return m + log((v.derived().array() - m).exp().sum());
}

/// Log posterior over all B_n partitions of the tuple, in table order.
///
/// Subset statistics come from one pass through `seg_subset`, partition
/// log-likelihoods from one pass through `part_subset`; the prior is added and
/// the result log-normalized.
template <typename Scalar>
Vec<Scalar> clustering_log_posterior(std::span<const ProbEmbedding<Scalar>> tuple,
                                     const DiagPlda<Scalar>& plda, const PartitionTables& tables) {
  const auto n = static_cast<Eigen::Index>(tuple.size());
  if (n != tables.n()) {
    throw ShapeError("clustering_log_posterior: tuple has " + std::to_string(n) +
                     " segments, tables are for " + std::to_string(tables.n()));
  }
  const Eigen::Index dim = plda.dim();
  Mat<Scalar> weights(n, dim);
  Mat<Scalar> weighted_x(n, dim);
  for (Eigen::Index t = 0; t < n; ++t) {
    check_embedding(tuple[t], dim);
    weights.row(t) = segment_weight(plda, tuple[t].prec).transpose();
    weighted_x.row(t) = weights.row(t).cwiseProduct(tuple[t].xhat.transpose());
  }
  const Mat<Scalar> a_sub = tables.seg_subset().transpose_multiply(weighted_x);
  const Mat<Scalar> b_sub = tables.seg_subset().transpose_multiply(weights);
  const Vec<Scalar> subset_ll =
      ((a_sub.array().square() / (Scalar(1) + b_sub.array()) - b_sub.array().log1p()).rowwise().sum() /
       Scalar(2))
          .matrix();
  Vec<Scalar> scores = tables.part_subset().multiply(subset_ll) + tables.log_prior().cast<Scalar>();
  scores.array() -= log_sum_exp(scores);
  return scores;
}

template <typename Scalar>
Vec<Scalar> clustering_log_posterior(const std::vector<ProbEmbedding<Scalar>>& tuple,
                                     const DiagPlda<Scalar>& plda, const PartitionTables& tables) {
  return clustering_log_posterior(std::span<const ProbEmbedding<Scalar>>(tuple), plda, tables);
}

/// Same-speaker versus different-speaker log-likelihood ratio of two segments.
template <typename Scalar>
Scalar pairwise_llr(const ProbEmbedding<Scalar>& e1, const ProbEmbedding<Scalar>& e2,
                    const DiagPlda<Scalar>& plda) {
  const ProbEmbedding<Scalar> both[2] = {e1, e2};
  const auto s1 = accumulate(std::span<const ProbEmbedding<Scalar>>(both, 1), plda);
  const auto s2 = accumulate(std::span<const ProbEmbedding<Scalar>>(both + 1, 1), plda);
  // Both sums commute bitwise, so the score is exactly symmetric.
  return cluster_loglik(s1 + s2) - (cluster_loglik(s1) + cluster_loglik(s2));
}

template <typename Scalar>
struct Diagonalization {
  Mat<Scalar> transform;  ///< rows ordered by decreasing within precision
  DiagPlda<Scalar> plda;
};

/// Finds T with T B T' = I and T W^-1 T' diagonal, where B is the
/// between-speaker covariance. Rows of T are ordered by decreasing w (most
/// speaker-discriminative first) and each row's largest-magnitude entry is
/// positive.
template <typename Scalar>
Diagonalization<Scalar> joint_diagonalize(const FullPlda<Scalar>& model) {
  const auto& between = model.between_cov;
  const auto& within = model.within_cov;
  const Eigen::Index d = between.rows();
  if (d == 0 || between.cols() != d || within.rows() != d || within.cols() != d) {
    throw ShapeError("joint_diagonalize: covariances must be square and of equal size");
  }
  const Scalar scale_b = between.cwiseAbs().maxCoeff();
  const Scalar scale_w = within.cwiseAbs().maxCoeff();
  if ((between - between.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale_b ||
      (within - within.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale_w) {
    throw DomainError("joint_diagonalize: covariances must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> eb(between, Eigen::EigenvaluesOnly);
  if (eb.info() != Eigen::Success || !(eb.eigenvalues()(0) > Scalar(1e-12) * eb.eigenvalues()(d - 1))) {
    throw DecompositionError("joint_diagonalize: between-speaker covariance is rank deficient");
  }
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> ew(within, Eigen::EigenvaluesOnly);
  if (ew.info() != Eigen::Success || !(ew.eigenvalues()(0) > Scalar(0))) {
    throw DecompositionError("joint_diagonalize: within-speaker covariance is not positive definite");
  }
  // within v = lambda between v, v' between v = 1; ascending lambda.
  Eigen::GeneralizedSelfAdjointEigenSolver<Mat<Scalar>> ge(within, between,
                                                           Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  if (ge.info() != Eigen::Success) throw DecompositionError("joint_diagonalize: eigensolver failed");

  Diagonalization<Scalar> out;
  out.transform = ge.eigenvectors().transpose();
  for (Eigen::Index i = 0; i < d; ++i) {
    Eigen::Index arg;
    out.transform.row(i).cwiseAbs().maxCoeff(&arg);
    if (out.transform(i, arg) < Scalar(0)) out.transform.row(i) *= Scalar(-1);
  }
  const Mat<Scalar> within_t = out.transform * within * out.transform.transpose();
  out.plda.w = within_t.diagonal().cwiseInverse();
  return out;
}

}  // namespace pdiar
