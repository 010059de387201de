#pragma once

// Set partitions of small tuples: restricted growth strings, the Chinese
// restaurant (Pitman-Yor) partition prior, and the precomputed tables that turn
// the clustering posterior into two sparse 0/1 accumulations and a softmax.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pdiar {

/// Canonical label sequence of a set partition. Labels are 1-based, the first
/// label is 1 and every label is at most one more than the running maximum.
class LabelString {
 public:
  LabelString() = default;

  /// Throws DomainError unless `labels` is a nonempty restricted growth string.
  static LabelString from_labels(std::vector<int> labels);

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  int operator[](std::size_t i) const { return labels_[i]; }
  std::span<const int> labels() const noexcept { return labels_; }
  auto begin() const noexcept { return labels_.begin(); }
  auto end() const noexcept { return labels_.end(); }

  /// Number of clusters, i.e. the largest label.
  int num_clusters() const noexcept;

  /// Comma separated, e.g. "1,1,2".
  std::string str() const;

  friend auto operator<=>(const LabelString&, const LabelString&) = default;

 private:
  explicit LabelString(std::vector<int> labels) : labels_(std::move(labels)) {}
  friend LabelString canonicalize_ints(std::span<const int>);
  std::vector<int> labels_;
};

bool is_restricted_growth(std::span<const int> labels) noexcept;

/// Bell number B_n, 1 <= n <= 16, by the Bell triangle.
std::uint64_t bell_number(int n);

inline constexpr int kMaxEnumerate = 12;

/// Calls `visit(std::span<const int>)` with every restricted growth string of
/// length n in lexicographic order. Labels passed to `visit` are 0-based.
template <typename Visitor>
void for_each_rgs(int n, Visitor&& visit);

/// All B_n restricted growth strings of length n, lexicographically ordered.
std::vector<LabelString> enumerate_rgs(int n);

LabelString canonicalize_ints(std::span<const int> labels);

/// Relabels by order of first appearance. Works for any equality-comparable
/// label type (ints, speaker names, ...).
template <typename Range>
LabelString canonicalize(const Range& labels) {
  std::vector<typename Range::value_type> seen;
  std::vector<int> out;
  for (const auto& l : labels) {
    std::size_t k = 0;
    while (k < seen.size() && !(seen[k] == l)) ++k;
    if (k == seen.size()) seen.push_back(l);
    out.push_back(static_cast<int>(k) + 1);
  }
  return canonicalize_ints(out);
}

/// Pitman-Yor partition prior. With discount 0 this is the ordinary CRP.
struct CrpParams {
  double concentration = 1.0;
  double discount = 0.0;

  /// Throws DomainError unless concentration >= 0, 0 <= discount < 1 and
  /// concentration + discount > 0.
  void validate() const;
};

double crp_log_prob(const LabelString& labels, const CrpParams& params);

/// Exact E[K_n] and Var[K_n] for the number of clusters among n draws. The
/// seating indicator depends on the past only through K, so both moments obey
/// closed recurrences.
double crp_expected_clusters(int n, const CrpParams& params);
double crp_cluster_variance(int n, const CrpParams& params);

inline constexpr double kCrpMinConcentration = 1e-12;
inline constexpr double kCrpMaxConcentration = 1e8;

struct CrpFit {
  CrpParams params;
  double expected_clusters = 0.0;
  double variance = 0.0;
  bool clipped = false;  ///< concentration hit kCrpMaxConcentration
};

/// Chooses (concentration, discount) so that the expected number of clusters
/// among `n_total` draws equals `expected_speakers`, maximizing the variance of
/// the cluster count over discount in {0, 0.05, ..., 0.95}. The concentration
/// for each discount is found by bisection on the exact expectation.
CrpFit fit_crp(int n_total, double expected_speakers);

/// Row-compressed 0/1 matrix: each row stores its column indices.
class BinaryCsr {
 public:
  BinaryCsr() = default;
  BinaryCsr(std::size_t cols, std::vector<std::size_t> row_ptr, std::vector<std::uint32_t> col_idx);

  std::size_t rows() const noexcept { return row_ptr_.empty() ? 0 : row_ptr_.size() - 1; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nonzeros() const noexcept { return col_idx_.size(); }
  std::span<const std::uint32_t> row(std::size_t i) const {
    return {col_idx_.data() + row_ptr_[i], row_ptr_[i + 1] - row_ptr_[i]};
  }

  /// y = M x
  template <typename Derived>
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> multiply(
      const Eigen::MatrixBase<Derived>& x) const;

  /// Y = M' X, for X with rows() rows.
  template <typename Derived>
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> transpose_multiply(
      const Eigen::MatrixBase<Derived>& x) const;

  /// Y = M X, for X with cols() rows.
  template <typename Derived>
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> multiply_rows(
      const Eigen::MatrixBase<Derived>& x) const;

  Eigen::MatrixXd to_dense() const;

  friend bool operator==(const BinaryCsr&, const BinaryCsr&) = default;

 private:
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> col_idx_;
};

/// Everything needed to score all partitions of an n-tuple.
///
/// Subset columns are indexed by bitmask minus one: column c is the subset
/// {t : bit t of (c + 1) is set}, so there are 2^n - 1 of them.
/// `seg_subset` (n x (2^n - 1)) has a 1 where segment t belongs to subset c;
/// `part_subset` (B_n x (2^n - 1)) has a 1 for every nonempty cluster of
/// partition r.
class PartitionTables {
 public:
  PartitionTables() = default;

  int n() const noexcept { return n_; }
  std::size_t size() const noexcept { return log_prior_.size(); }
  std::size_t num_subsets() const noexcept { return (std::size_t{1} << n_) - 1; }
  const CrpParams& prior() const noexcept { return prior_; }

  LabelString rgs(std::size_t r) const;
  /// 0-based labels of partition r.
  std::span<const std::uint8_t> codes(std::size_t r) const {
    return {codes_.data() + r * static_cast<std::size_t>(n_), static_cast<std::size_t>(n_)};
  }
  const Eigen::VectorXd& log_prior() const noexcept { return log_prior_; }
  const BinaryCsr& seg_subset() const noexcept { return seg_subset_; }
  const BinaryCsr& part_subset() const noexcept { return part_subset_; }

  /// Lexicographic rank of `labels` among the B_n strings, computed by
  /// counting completions rather than searching.
  std::size_t index_of(const LabelString& labels) const;

  /// Versioned little-endian binary dump.
  void save(const std::filesystem::path& path) const;
  static PartitionTables load(const std::filesystem::path& path);

  friend PartitionTables build_tables(int n, const CrpParams& prior);
  friend bool operator==(const PartitionTables&, const PartitionTables&);

 private:
  void build_sparse();

  int n_ = 0;
  CrpParams prior_;
  std::vector<std::uint8_t> codes_;
  Eigen::VectorXd log_prior_;
  BinaryCsr seg_subset_;
  BinaryCsr part_subset_;
  std::vector<std::uint64_t> completions_;  // (n+1) x (n+2), row m = remaining, col k = max so far
};

/// 1 <= n <= 12.
PartitionTables build_tables(int n, const CrpParams& prior);

/// Loads the tables for (n, prior) from `cache_dir` if present, otherwise
/// builds and stores them. The result is identical either way.
PartitionTables cached_tables(int n, const CrpParams& prior, const std::filesystem::path& cache_dir);

// ---------------------------------------------------------------------------

template <typename Visitor>
void for_each_rgs(int n, Visitor&& visit) {
  std::vector<int> a(static_cast<std::size_t>(n), 0);
  // prefix_max[i] = max(a[0..i])
  std::vector<int> prefix_max(static_cast<std::size_t>(n), 0);
  while (true) {
    visit(std::span<const int>(a));
    int i = n - 1;
    while (i > 0 && a[i] > prefix_max[i - 1]) --i;
    if (i <= 0) return;
    ++a[i];
    prefix_max[i] = std::max(prefix_max[i - 1], a[i]);
    for (int k = i + 1; k < n; ++k) {
      a[k] = 0;
      prefix_max[k] = prefix_max[k - 1];
    }
  }
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> BinaryCsr::multiply(
    const Eigen::MatrixBase<Derived>& x) const {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y(rows());
  for (std::size_t r = 0; r < rows(); ++r) {
    Scalar s(0);
    for (auto c : row(r)) s += x(c);
    y(r) = s;
  }
  return y;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> BinaryCsr::transpose_multiply(
    const Eigen::MatrixBase<Derived>& x) const {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> y =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(cols(), x.cols());
  for (std::size_t r = 0; r < rows(); ++r) {
    for (auto c : row(r)) y.row(c) += x.row(r);
  }
  return y;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> BinaryCsr::multiply_rows(
    const Eigen::MatrixBase<Derived>& x) const {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> y =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(rows(), x.cols());
  for (std::size_t r = 0; r < rows(); ++r) {
    for (auto c : row(r)) y.row(r) += x.row(c);
  }
  return y;
}

}  // namespace pdiar
