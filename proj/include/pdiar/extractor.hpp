#pragma once

// Probabilistic embedding extractor: a linear transform of the raw embedding
// gives the mean, and a linear-softplus-linear-softplus network of the quality
// features gives the diagonal precision.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pdiar/plda.hpp"

namespace pdiar {

struct SegmentRecord {
  Eigen::VectorXd raw;      ///< stand-in for the length-normalized x-vector
  Eigen::VectorXd quality;  ///< stand-in for pooling statistics and duration
  double duration = 0.0;    ///< seconds
};

struct PrecisionNet {
  Eigen::MatrixXd W1;  ///< H x Q
  Eigen::VectorXd b1;  ///< H
  Eigen::MatrixXd W2;  ///< D x H
  Eigen::VectorXd b2;  ///< D

  Eigen::Index input_dim() const { return W1.cols(); }
  Eigen::Index hidden_dim() const { return W1.rows(); }
  Eigen::Index output_dim() const { return W2.rows(); }
};

struct ExtractorModel {
  Eigen::MatrixXd transform;  ///< D x R
  PrecisionNet net;

  Eigen::Index dim() const { return transform.rows(); }
  Eigen::Index raw_dim() const { return transform.cols(); }
  Eigen::Index quality_dim() const { return net.input_dim(); }

  /// Throws ShapeError on inconsistent shapes, DomainError on non-finite values.
  void validate() const;
};

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
/// Derivative of softplus.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y)); }

template <typename Derived>
Eigen::VectorXd softplus(const Eigen::MatrixBase<Derived>& z) {
  return z.derived().unaryExpr([](double v) { return softplus(v); });
}

ProbEmbeddingd extract(const SegmentRecord& rec, const ExtractorModel& model);
std::vector<ProbEmbeddingd> extract(std::span<const SegmentRecord> recs, const ExtractorModel& model);

/// Pulls output gradients (dL/dxhat, dL/dprec) back to the parameters.
/// `grad` has the shape of `model` and is accumulated into.
void extract_backward(const SegmentRecord& rec, const ExtractorModel& model, const Eigen::VectorXd& d_xhat,
                      const Eigen::VectorXd& d_prec, ExtractorModel& grad);

/// A zero-valued model with the same shapes as `model`.
ExtractorModel zeros_like(const ExtractorModel& model);

struct ExtractorInit {
  Eigen::Index quality_dim = 0;
  Eigen::Index hidden_dim = 0;  ///< 0 means 2 * D
  Eigen::Index keep_dims = 0;   ///< keep the most speaker-discriminative dims; 0 keeps all
  double margin = 100.0;        ///< initial precisions are at least margin * w
  double weight_scale = 0.01;   ///< std of the random W1, W2 entries
};

struct InitializedExtractor {
  ExtractorModel model;
  DiagPldad plda;
};

/// Initializes the mean transform and within precisions from the joint
/// diagonalization of `full`, and the precision net so that its outputs sit
/// far above w (softplus(b2_j) = 2 margin w_j with small random weights),
/// which makes the initial system behave like plug-in PLDA scoring.
InitializedExtractor init_extractor(const FullPldad& full, std::uint64_t seed, const ExtractorInit& options);

/// Moment estimate of the two-covariance model from labeled raw embeddings:
/// pooled within-speaker scatter and the between-speaker covariance of the
/// speaker means, corrected for the within contribution.
FullPldad estimate_two_covariance(std::span<const Eigen::VectorXd> raw, std::span<const int> speaker);

}  // namespace pdiar
