#include "pdiar/extractor.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "pdiar/errors.hpp"
#include "pdiar/rng.hpp"

namespace pdiar {

void ExtractorModel::validate() const {
  const auto d = transform.rows();
  if (d == 0 || transform.cols() == 0) throw ShapeError("extractor: empty mean transform");
  if (net.b1.size() != net.W1.rows() || net.W2.cols() != net.W1.rows() || net.W2.rows() != d ||
      net.b2.size() != d) {
    throw ShapeError("extractor: precision net shapes are inconsistent with D = " + std::to_string(d));
  }
  if (!transform.allFinite() || !net.W1.allFinite() || !net.b1.allFinite() || !net.W2.allFinite() ||
      !net.b2.allFinite()) {
    throw DomainError("extractor: non-finite parameters");
  }
}

namespace {

void check_record(const SegmentRecord& rec, const ExtractorModel& model) {
  if (rec.raw.size() != model.raw_dim() || rec.quality.size() != model.quality_dim()) {
    throw ShapeError("segment record has raw/quality dims " + std::to_string(rec.raw.size()) + "/" +
                     std::to_string(rec.quality.size()) + ", model expects " +
                     std::to_string(model.raw_dim()) + "/" + std::to_string(model.quality_dim()));
  }
}

}  // namespace

ProbEmbeddingd extract(const SegmentRecord& rec, const ExtractorModel& model) {
  check_record(rec, model);
  const auto& net = model.net;
  ProbEmbeddingd e;
  e.xhat = model.transform * rec.raw;
  const Eigen::VectorXd hidden = softplus(net.W1 * rec.quality + net.b1);
  e.prec = softplus(net.W2 * hidden + net.b2);
  return e;
}

std::vector<ProbEmbeddingd> extract(std::span<const SegmentRecord> recs, const ExtractorModel& model) {
  std::vector<ProbEmbeddingd> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(extract(r, model));
  return out;
}

void extract_backward(const SegmentRecord& rec, const ExtractorModel& model, const Eigen::VectorXd& d_xhat,
                      const Eigen::VectorXd& d_prec, ExtractorModel& grad) {
  const auto& net = model.net;
  grad.transform.noalias() += d_xhat * rec.raw.transpose();

  const Eigen::VectorXd z1 = net.W1 * rec.quality + net.b1;
  const Eigen::VectorXd hidden = softplus(z1);
  const Eigen::VectorXd z2 = net.W2 * hidden + net.b2;
  const Eigen::VectorXd d_z2 = d_prec.cwiseProduct(z2.unaryExpr([](double v) { return sigmoid(v); }));
  grad.net.W2.noalias() += d_z2 * hidden.transpose();
  grad.net.b2 += d_z2;
  const Eigen::VectorXd d_z1 =
      (net.W2.transpose() * d_z2).cwiseProduct(z1.unaryExpr([](double v) { return sigmoid(v); }));
  grad.net.W1.noalias() += d_z1 * rec.quality.transpose();
  grad.net.b1 += d_z1;
}

ExtractorModel zeros_like(const ExtractorModel& model) {
  ExtractorModel z;
  z.transform = Eigen::MatrixXd::Zero(model.transform.rows(), model.transform.cols());
  z.net.W1 = Eigen::MatrixXd::Zero(model.net.W1.rows(), model.net.W1.cols());
  z.net.b1 = Eigen::VectorXd::Zero(model.net.b1.size());
  z.net.W2 = Eigen::MatrixXd::Zero(model.net.W2.rows(), model.net.W2.cols());
  z.net.b2 = Eigen::VectorXd::Zero(model.net.b2.size());
  return z;
}

InitializedExtractor init_extractor(const FullPldad& full, std::uint64_t seed, const ExtractorInit& options) {
  if (!(options.margin > 0.0) || !std::isfinite(options.margin)) {
    throw DomainError("init_extractor: margin must be positive and finite");
  }
  if (options.quality_dim <= 0) throw DomainError("init_extractor: quality_dim must be positive");
  if (!(options.weight_scale >= 0.0)) throw DomainError("init_extractor: weight_scale must be >= 0");
  const auto diag = joint_diagonalize(full);
  const Eigen::Index r = diag.transform.rows();
  const Eigen::Index d = options.keep_dims > 0 ? options.keep_dims : r;
  if (d > r) throw DomainError("init_extractor: keep_dims exceeds the model dimension");
  const Eigen::Index h = options.hidden_dim > 0 ? options.hidden_dim : 2 * d;

  InitializedExtractor out;
  out.model.transform = diag.transform.topRows(d);
  out.plda.w = diag.plda.w.head(d);

  auto rng = substream(seed, "init");
  std::normal_distribution<double> gauss(0.0, options.weight_scale);
  auto& net = out.model.net;
  net.W1 = Eigen::MatrixXd::NullaryExpr(h, options.quality_dim, [&] { return gauss(rng); });
  net.b1 = Eigen::VectorXd::Zero(h);
  net.W2 = Eigen::MatrixXd::NullaryExpr(d, h, [&] { return gauss(rng); });
  net.b2 = out.plda.w.unaryExpr([&](double w) { return softplus_inverse(2.0 * options.margin * w); });
  return out;
}

FullPldad estimate_two_covariance(std::span<const Eigen::VectorXd> raw, std::span<const int> speaker) {
  if (raw.size() != speaker.size()) throw ShapeError("estimate_two_covariance: label count mismatch");
  if (raw.empty()) throw DataError("estimate_two_covariance: no data");
  const Eigen::Index dim = raw.front().size();
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].size() != dim) throw ShapeError("estimate_two_covariance: inconsistent dimensions");
    groups[speaker[i]].push_back(i);
  }
  const auto n_spk = static_cast<double>(groups.size());
  const auto n = static_cast<double>(raw.size());
  if (groups.size() < 2 || n <= n_spk) {
    throw DataError("estimate_two_covariance: need at least two speakers with repeated segments");
  }
  Eigen::MatrixXd within = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd means(dim, static_cast<Eigen::Index>(groups.size()));
  double inv_count = 0.0;
  Eigen::Index k = 0;
  for (const auto& [spk, idx] : groups) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dim);
    for (auto i : idx) m += raw[i];
    m /= static_cast<double>(idx.size());
    for (auto i : idx) within.noalias() += (raw[i] - m) * (raw[i] - m).transpose();
    means.col(k++) = m;
    inv_count += 1.0 / static_cast<double>(idx.size());
  }
  within /= n - n_spk;
  const Eigen::MatrixXd centered = means.colwise() - means.rowwise().mean();
  Eigen::MatrixXd between = centered * centered.transpose() / (n_spk - 1.0) - within * (inv_count / n_spk);

  // Clamp the between covariance to be positive definite.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (between + between.transpose()));
  const double floor = 1e-6 * std::max(es.eigenvalues().maxCoeff(), 1e-12);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
  between = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  between = 0.5 * (between + between.transpose()).eval();
  within = 0.5 * (within + within.transpose()).eval();
  return {between, within};
}

}  // namespace pdiar
