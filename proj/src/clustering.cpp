#include "pdiar/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pdiar {

std::string to_string(AhcMode mode) { return mode == AhcMode::Baseline ? "baseline" : "book"; }

AhcMode parse_ahc_mode(const std::string& text) {
  if (text == "baseline") return AhcMode::Baseline;
  if (text == "book") return AhcMode::ByTheBook;
  throw DomainError("unknown AHC mode '" + text + "' (expected baseline or book)");
}

void AhcConfig::validate() const {
  if (std::isnan(sigma)) throw DomainError("AHC sigma must not be NaN");
  if (!(likelihood_scale > 0.0) || !std::isfinite(likelihood_scale)) {
    throw DomainError("AHC likelihood_scale must be finite and > 0");
  }
}

// ---------------------------------------------------------------- state

ClusterState::ClusterState(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, double scale) {
  plda.validate();
  stats_.reserve(embeddings.size());
  members_.reserve(embeddings.size());
  for (std::size_t t = 0; t < embeddings.size(); ++t) {
    stats_.push_back(accumulate(embeddings.subspan(t, 1), plda, scale));
    members_.push_back({static_cast<int>(t)});
  }
  num_active_ = static_cast<int>(embeddings.size());
}

void ClusterState::merge(int a, int b) {
  if (a >= b || !active(a) || !active(b)) throw InternalError("ClusterState::merge: bad cluster pair");
  auto& ma = members_[static_cast<std::size_t>(a)];
  auto& mb = members_[static_cast<std::size_t>(b)];
  stats_[static_cast<std::size_t>(a)] += stats_[static_cast<std::size_t>(b)];
  ma.insert(ma.end(), mb.begin(), mb.end());
  std::sort(ma.begin(), ma.end());
  mb.clear();
  --num_active_;
}

double ClusterState::total_loglik() const {
  double total = 0.0;
  for (int i = 0; i < size(); ++i)
    if (active(i)) total += cluster_loglik(stats(i));
  return total;
}

LabelString ClusterState::labels() const {
  std::vector<int> owner(members_.size(), 0);
  for (int i = 0; i < size(); ++i)
    for (int t : members(i)) owner[static_cast<std::size_t>(t)] = i;
  return canonicalize(owner);
}

// ---------------------------------------------------------------- traces

LabelString cut(const MergeTrace& trace, double threshold, bool strict) {
  if (trace.n < 1) throw DataError("cannot cluster zero segments");
  std::vector<int> owner(static_cast<std::size_t>(trace.n));
  for (int t = 0; t < trace.n; ++t) owner[static_cast<std::size_t>(t)] = t;
  for (const auto& m : trace.merges) {
    if (strict ? !(m.score > threshold) : !(m.score >= threshold)) break;
    for (auto& o : owner)
      if (o == m.absorbed) o = m.keep;
  }
  return canonicalize(owner);
}

namespace {

// Scans the active upper triangle for the largest entry; ties keep the first
// pair in lexicographic order.
template <typename Active>
std::pair<int, int> best_pair(const Eigen::MatrixXd& score, const Active& active) {
  const int n = static_cast<int>(score.rows());
  std::pair<int, int> best{-1, -1};
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (!active(i)) continue;
    for (int j = i + 1; j < n; ++j) {
      if (!active(j)) continue;
      const double s = score(i, j);
      if (best.first < 0 || s > best_score) {
        best = {i, j};
        best_score = s;
      }
    }
  }
  return best;
}

void require_segments(std::span<const ProbEmbeddingd> embeddings) {
  if (embeddings.empty()) throw DataError("cannot cluster zero segments");
}

}  // namespace

MergeTrace by_the_book_trace(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                             double likelihood_scale) {
  require_segments(embeddings);
  ClusterState state(embeddings, plda, likelihood_scale);
  const int n = state.size();
  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) delta(i, j) = merge_delta(state.stats(i), state.stats(j));

  MergeTrace trace{n, {}};
  auto active = [&](int i) { return state.active(i); };
  while (state.num_active() > 1) {
    const auto [a, b] = best_pair(delta, active);
    trace.merges.push_back({a, b, delta(a, b)});
    state.merge(a, b);
#ifndef NDEBUG
    {
      std::vector<ProbEmbeddingd> members;
      for (int t : state.members(a)) members.push_back(embeddings[static_cast<std::size_t>(t)]);
      const auto fresh = accumulate(members, plda, likelihood_scale);
      if ((fresh.a_bar - state.stats(a).a_bar).norm() > 1e-9 * (1.0 + fresh.a_bar.norm()) ||
          (fresh.b_bar - state.stats(a).b_bar).norm() > 1e-9 * (1.0 + fresh.b_bar.norm())) {
        throw InternalError("cluster statistics drifted from their members");
      }
    }
#endif
    // Only pairs involving the merged cluster change.
    for (int k = 0; k < n; ++k) {
      if (k == a || !state.active(k)) continue;
      const double d = merge_delta(state.stats(std::min(a, k)), state.stats(std::max(a, k)));
      delta(std::min(a, k), std::max(a, k)) = d;
    }
  }
  return trace;
}

Eigen::MatrixXd plug_in_scores(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                               double likelihood_scale) {
  plda.validate();
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  std::vector<ClusterStatsd> single;
  std::vector<double> self;
  for (const auto& e : embeddings) {
    check_embedding(e, plda.dim());
    const ProbEmbeddingd plug{e.xhat, Eigen::VectorXd::Constant(plda.dim(), std::numeric_limits<double>::infinity())};
    single.push_back(accumulate(std::span(&plug, 1), plda, likelihood_scale));
    self.push_back(cluster_loglik(single.back()));
  }
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto ui = static_cast<std::size_t>(i);
      const auto uj = static_cast<std::size_t>(j);
      s(i, j) = s(j, i) = cluster_loglik(single[ui] + single[uj]) - (self[ui] + self[uj]);
    }
  }
  return s;
}

MergeTrace average_linkage_trace(const Eigen::MatrixXd& similarity) {
  const int n = static_cast<int>(similarity.rows());
  if (n < 1 || similarity.cols() != n) throw ShapeError("similarity matrix must be square and nonempty");
  Eigen::MatrixXd s = similarity;
  std::vector<bool> alive(static_cast<std::size_t>(n), true);
  std::vector<double> size(static_cast<std::size_t>(n), 1.0);
  auto active = [&](int i) { return static_cast<bool>(alive[static_cast<std::size_t>(i)]); };
  MergeTrace trace{n, {}};
  for (int left = n; left > 1; --left) {
    const auto [a, b] = best_pair(s, active);
    trace.merges.push_back({a, b, s(a, b)});
    alive[static_cast<std::size_t>(b)] = false;
    const double na = size[static_cast<std::size_t>(a)], nb = size[static_cast<std::size_t>(b)];
    // Mean over all cross-cluster segment pairs.
    for (int k = 0; k < n; ++k) {
      if (k == a || !active(k)) continue;
      s(a, k) = s(k, a) = (na * s(a, k) + nb * s(b, k)) / (na + nb);
    }
    size[static_cast<std::size_t>(a)] = na + nb;
  }
  return trace;
}

double unsupervised_calibration(std::span<const double> scores) {
  const auto n = scores.size();
  if (n < 2) throw CalibrationError("unsupervised calibration needs at least two scores");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  if (!std::isfinite(sorted.front()) || !std::isfinite(sorted.back())) {
    throw CalibrationError("unsupervised calibration: non-finite score");
  }
  if (sorted.front() == sorted.back()) throw CalibrationError("unsupervised calibration: all scores are equal");
  auto percentile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, n - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  double mean = 0.0;
  for (double x : scores) mean += x;
  mean /= static_cast<double>(n);
  double total_var = 0.0;
  for (double x : scores) total_var += (x - mean) * (x - mean);
  total_var /= static_cast<double>(n);

  double mu1 = percentile(0.1);
  double mu2 = percentile(0.9);
  if (mu1 == mu2) {
    mu1 = sorted.front();
    mu2 = sorted.back();
  }
  double var = total_var;
  double pi1 = 0.5;
  const double var_floor = 1e-12 * total_var;
  std::vector<double> r(n);  // responsibility of component 2
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = scores[i];
      const double l1 = std::log(pi1) - (x - mu1) * (x - mu1) / (2 * var);
      const double l2 = std::log1p(-pi1) - (x - mu2) * (x - mu2) / (2 * var);
      r[i] = 1.0 / (1.0 + std::exp(l1 - l2));
    }
    double n2 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      n2 += r[i];
      s1 += (1.0 - r[i]) * scores[i];
      s2 += r[i] * scores[i];
    }
    const double n1 = static_cast<double>(n) - n2;
    if (!(n1 > 1e-12) || !(n2 > 1e-12)) throw CalibrationError("unsupervised calibration: a component collapsed");
    const double new_mu1 = s1 / n1;
    const double new_mu2 = s2 / n2;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v += (1.0 - r[i]) * (scores[i] - new_mu1) * (scores[i] - new_mu1) + r[i] * (scores[i] - new_mu2) * (scores[i] - new_mu2);
    }
    const double new_var = std::max(v / static_cast<double>(n), var_floor);
    const double new_pi1 = n1 / static_cast<double>(n);
    const double tol = 1e-9;
    const bool done = std::abs(new_mu1 - mu1) <= tol * (1 + std::abs(mu1)) &&
                      std::abs(new_mu2 - mu2) <= tol * (1 + std::abs(mu2)) &&
                      std::abs(new_var - var) <= tol * (1 + var) && std::abs(new_pi1 - pi1) <= tol;
    mu1 = new_mu1;
    mu2 = new_mu2;
    var = new_var;
    pi1 = new_pi1;
    if (done) break;
  }
  if (mu1 == mu2) throw CalibrationError("unsupervised calibration: components coincide");
  // pi1 N(x; mu1, v) = pi2 N(x; mu2, v)
  return 0.5 * (mu1 + mu2) + var * std::log((1.0 - pi1) / pi1) / (mu1 - mu2);
}

double baseline_threshold(const Eigen::MatrixXd& similarity) {
  const auto n = similarity.rows();
  std::vector<double> upper;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) upper.push_back(similarity(i, j));
  if (upper.size() < 2) return 0.0;
  return unsupervised_calibration(upper);
}

LabelString ahc_by_the_book(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                            const AhcConfig& cfg) {
  cfg.validate();
  return cut(by_the_book_trace(embeddings, plda, cfg.likelihood_scale), cfg.sigma, true);
}

LabelString ahc_baseline(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, const AhcConfig& cfg) {
  cfg.validate();
  require_segments(embeddings);
  const auto sim = plug_in_scores(embeddings, plda, cfg.likelihood_scale);
  return cut(average_linkage_trace(sim), baseline_threshold(sim) + cfg.sigma, false);
}

LabelString diarize_embeddings(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda,
                               const AhcConfig& cfg) {
  return cfg.mode == AhcMode::Baseline ? ahc_baseline(embeddings, plda, cfg) : ahc_by_the_book(embeddings, plda, cfg);
}

}  // namespace pdiar
