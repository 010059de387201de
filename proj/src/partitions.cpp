#include "pdiar/partitions.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "pdiar/errors.hpp"
#include "pdiar/log.hpp"

namespace pdiar {

// ---------------------------------------------------------------- LabelString

bool is_restricted_growth(std::span<const int> labels) noexcept {
  if (labels.empty() || labels[0] != 1) return false;
  int running_max = 1;
  for (std::size_t t = 1; t < labels.size(); ++t) {
    if (labels[t] < 1 || labels[t] > running_max + 1) return false;
    running_max = std::max(running_max, labels[t]);
  }
  return true;
}

LabelString LabelString::from_labels(std::vector<int> labels) {
  if (!is_restricted_growth(labels)) {
    throw DomainError("label sequence is not a restricted growth string");
  }
  return LabelString(std::move(labels));
}

int LabelString::num_clusters() const noexcept {
  return labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
}

std::string LabelString::str() const {
  std::string s;
  for (std::size_t t = 0; t < labels_.size(); ++t) {
    if (t) s += ',';
    s += std::to_string(labels_[t]);
  }
  return s;
}

LabelString canonicalize_ints(std::span<const int> labels) {
  std::vector<int> seen;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) {
    auto it = std::find(seen.begin(), seen.end(), l);
    if (it == seen.end()) {
      seen.push_back(l);
      out.push_back(static_cast<int>(seen.size()));
    } else {
      out.push_back(static_cast<int>(it - seen.begin()) + 1);
    }
  }
  return LabelString(std::move(out));
}

// ---------------------------------------------------------------- counting

std::uint64_t bell_number(int n) {
  if (n < 1 || n > 16) throw SizeError("bell_number: n must be in 1..16, got " + std::to_string(n));
  // Bell triangle: each row starts with the last entry of the previous row.
  std::vector<std::uint64_t> row{1};
  for (int i = 1; i < n; ++i) {
    std::vector<std::uint64_t> next{row.back()};
    for (auto v : row) next.push_back(next.back() + v);
    row = std::move(next);
  }
  return row.back();
}

std::vector<LabelString> enumerate_rgs(int n) {
  if (n < 1 || n > kMaxEnumerate) {
    throw SizeError("enumerate_rgs: n must be in 1.." + std::to_string(kMaxEnumerate));
  }
  std::vector<LabelString> out;
  out.reserve(bell_number(n));
  std::vector<int> buf(static_cast<std::size_t>(n));
  for_each_rgs(n, [&](std::span<const int> a) {
    for (int t = 0; t < n; ++t) buf[t] = a[t] + 1;
    out.push_back(LabelString::from_labels(buf));
  });
  return out;
}

// ---------------------------------------------------------------- CRP

void CrpParams::validate() const {
  if (!(std::isfinite(concentration) && concentration >= 0.0)) {
    throw DomainError("CRP concentration must be finite and >= 0");
  }
  if (!(discount >= 0.0 && discount < 1.0)) throw DomainError("CRP discount must be in [0, 1)");
  if (!(concentration + discount > 0.0)) throw DomainError("CRP concentration + discount must be > 0");
}

double crp_log_prob(const LabelString& labels, const CrpParams& params) {
  params.validate();
  const double a = params.concentration;
  const double d = params.discount;
  std::vector<int> counts;
  double lp = 0.0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const auto k = static_cast<std::size_t>(labels[t] - 1);
    if (t > 0) {
      const double denom = a + static_cast<double>(t);
      if (k == counts.size()) {
        lp += std::log((a + static_cast<double>(counts.size()) * d) / denom);
      } else {
        lp += std::log((static_cast<double>(counts[k]) - d) / denom);
      }
    }
    if (k == counts.size()) counts.push_back(0);
    ++counts[k];
  }
  return lp;
}

namespace {

struct Moments {
  double mean;
  double second;
};

Moments crp_moments(int n, const CrpParams& p) {
  if (n < 1) throw DomainError("CRP moments need n >= 1");
  const double a = p.concentration;
  const double d = p.discount;
  double m1 = 1.0;
  double m2 = 1.0;
  for (int t = 1; t < n; ++t) {
    const double denom = a + t;
    // K' = K + Bernoulli(p), p = (a + d K) / (a + t)
    const double ep = (a + d * m1) / denom;
    const double ekp = (a * m1 + d * m2) / denom;
    m2 = m2 + 2.0 * ekp + ep;
    m1 = m1 + ep;
  }
  return {m1, m2};
}

}  // namespace

double crp_expected_clusters(int n, const CrpParams& params) {
  params.validate();
  return crp_moments(n, params).mean;
}

double crp_cluster_variance(int n, const CrpParams& params) {
  params.validate();
  const auto m = crp_moments(n, params);
  return std::max(0.0, m.second - m.mean * m.mean);
}

CrpFit fit_crp(int n_total, double expected_speakers) {
  if (n_total < 1) throw DomainError("fit_crp: n_total must be >= 1");
  if (!(expected_speakers >= 1.0 && expected_speakers <= n_total)) {
    throw DomainError("fit_crp: expected speakers must lie in [1, n_total]");
  }
  const double target = expected_speakers;
  const double rel_slack = 1e-9;

  CrpFit best;
  bool have_best = false;
  auto consider = [&](const CrpParams& p, bool clipped) {
    CrpFit f{p, crp_expected_clusters(n_total, p), crp_cluster_variance(n_total, p), clipped};
    // Unclipped solutions always beat clipped ones.
    if (!have_best || (best.clipped && !clipped) ||
        (best.clipped == clipped && f.variance > best.variance)) {
      best = f;
      have_best = true;
    }
  };

  for (int g = 0; g < 20; ++g) {
    const double d = 0.05 * g;
    double lo = d > 0.0 ? 0.0 : kCrpMinConcentration;
    double hi = kCrpMaxConcentration;
    const double e_lo = crp_expected_clusters(n_total, {lo, d});
    const double e_hi = crp_expected_clusters(n_total, {hi, d});
    if (e_lo > target * (1.0 + rel_slack)) continue;  // even the smallest concentration overshoots
    if (e_lo >= target) {
      consider({lo, d}, false);
      continue;
    }
    if (e_hi < target) {
      consider({hi, d}, true);
      continue;
    }
    // Bisection in log space; the expectation is increasing in the concentration.
    double llo = std::log(std::max(lo, kCrpMinConcentration));
    double lhi = std::log(hi);
    if (lo == 0.0 && crp_expected_clusters(n_total, {kCrpMinConcentration, d}) >= target) {
      consider({kCrpMinConcentration, d}, false);
      continue;
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (llo + lhi);
      if (crp_expected_clusters(n_total, {std::exp(mid), d}) < target) {
        llo = mid;
      } else {
        lhi = mid;
      }
    }
    consider({std::exp(0.5 * (llo + lhi)), d}, false);
  }
  if (!have_best) throw DomainError("fit_crp: no feasible (concentration, discount) for target");
  if (best.clipped) {
    warn("fit_crp: concentration clipped at " + std::to_string(kCrpMaxConcentration) + "; expected clusters " +
         std::to_string(best.expected_clusters) + " for target " + std::to_string(target));
  }
  return best;
}

// ---------------------------------------------------------------- BinaryCsr

BinaryCsr::BinaryCsr(std::size_t cols, std::vector<std::size_t> row_ptr,
                     std::vector<std::uint32_t> col_idx)
    : cols_(cols), row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)) {}

Eigen::MatrixXd BinaryCsr::to_dense() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows(), cols());
  for (std::size_t r = 0; r < rows(); ++r) {
    for (auto c : row(r)) m(r, c) = 1.0;
  }
  return m;
}

// ---------------------------------------------------------------- tables

namespace {

std::vector<std::uint64_t> completion_counts(int n) {
  // f(m, k): number of ways to fill m more positions when k labels are in use.
  const int cols = n + 2;
  std::vector<std::uint64_t> f(static_cast<std::size_t>((n + 1) * cols), 0);
  for (int k = 0; k < cols; ++k) f[k] = 1;
  for (int m = 1; m <= n; ++m) {
    for (int k = 0; k + 1 < cols; ++k) {
      f[m * cols + k] = static_cast<std::uint64_t>(k) * f[(m - 1) * cols + k] + f[(m - 1) * cols + k + 1];
    }
  }
  return f;
}

}  // namespace

void PartitionTables::build_sparse() {
  const auto n = static_cast<std::size_t>(n_);
  const std::size_t subsets = num_subsets();

  std::vector<std::size_t> row_ptr{0};
  std::vector<std::uint32_t> cols;
  cols.reserve(n << (n - 1));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t mask = 1; mask <= subsets; ++mask) {
      if (mask & (std::size_t{1} << t)) cols.push_back(static_cast<std::uint32_t>(mask - 1));
    }
    row_ptr.push_back(cols.size());
  }
  seg_subset_ = BinaryCsr(subsets, std::move(row_ptr), std::move(cols));

  row_ptr = {0};
  cols.clear();
  std::vector<std::uint32_t> masks(n);
  for (std::size_t r = 0; r < size(); ++r) {
    auto code = codes(r);
    std::fill(masks.begin(), masks.end(), 0u);
    std::size_t k_used = 0;
    for (std::size_t t = 0; t < n; ++t) {
      masks[code[t]] |= 1u << t;
      k_used = std::max<std::size_t>(k_used, code[t] + 1);
    }
    for (std::size_t k = 0; k < k_used; ++k) cols.push_back(masks[k] - 1);
    row_ptr.push_back(cols.size());
  }
  part_subset_ = BinaryCsr(subsets, std::move(row_ptr), std::move(cols));
  completions_ = completion_counts(n_);
}

PartitionTables build_tables(int n, const CrpParams& prior) {
  if (n < 1 || n > kMaxEnumerate) {
    throw SizeError("build_tables: n must be in 1.." + std::to_string(kMaxEnumerate));
  }
  prior.validate();
  PartitionTables tables;
  tables.n_ = n;
  tables.prior_ = prior;
  const auto bell = bell_number(n);
  tables.codes_.reserve(bell * static_cast<std::size_t>(n));
  tables.log_prior_.resize(static_cast<Eigen::Index>(bell));
  std::vector<int> one_based(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for_each_rgs(n, [&](std::span<const int> a) {
    for (int t = 0; t < n; ++t) {
      tables.codes_.push_back(static_cast<std::uint8_t>(a[t]));
      one_based[t] = a[t] + 1;
    }
    tables.log_prior_(r++) = crp_log_prob(LabelString::from_labels(one_based), prior);
  });
  tables.build_sparse();
  return tables;
}

LabelString PartitionTables::rgs(std::size_t r) const {
  auto code = codes(r);
  std::vector<int> labels(code.begin(), code.end());
  for (auto& l : labels) ++l;
  return LabelString::from_labels(std::move(labels));
}

std::size_t PartitionTables::index_of(const LabelString& labels) const {
  if (static_cast<int>(labels.size()) != n_) {
    throw ShapeError("index_of: label string length " + std::to_string(labels.size()) +
                     " does not match table size " + std::to_string(n_));
  }
  const int cols = n_ + 2;
  std::size_t rank = 0;
  int used = 1;
  for (int t = 1; t < n_; ++t) {
    const int remaining = n_ - t - 1;
    for (int v = 1; v < labels[t]; ++v) {
      const int k = std::max(used, v);
      rank += completions_[remaining * cols + k];
    }
    used = std::max(used, labels[t]);
  }
  return rank;
}

bool operator==(const PartitionTables& a, const PartitionTables& b) {
  return a.n_ == b.n_ && a.prior_.concentration == b.prior_.concentration &&
         a.prior_.discount == b.prior_.discount && a.codes_ == b.codes_ &&
         a.log_prior_.size() == b.log_prior_.size() &&
         std::memcmp(a.log_prior_.data(), b.log_prior_.data(),
                     sizeof(double) * static_cast<std::size_t>(a.log_prior_.size())) == 0 &&
         a.seg_subset_ == b.seg_subset_ && a.part_subset_ == b.part_subset_;
}

namespace {

constexpr char kTableMagic[8] = {'P', 'D', 'I', 'A', 'R', 'T', 'B', 'L'};
constexpr std::uint32_t kTableVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("partition table file is truncated");
  return v;
}

}  // namespace

void PartitionTables::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write partition tables to " + path.string());
  os.write(kTableMagic, sizeof kTableMagic);
  put(os, kTableVersion);
  put(os, static_cast<std::uint32_t>(n_));
  put(os, prior_.concentration);
  put(os, prior_.discount);
  put(os, static_cast<std::uint64_t>(size()));
  os.write(reinterpret_cast<const char*>(codes_.data()), static_cast<std::streamsize>(codes_.size()));
  os.write(reinterpret_cast<const char*>(log_prior_.data()),
           static_cast<std::streamsize>(sizeof(double) * size()));
  if (!os) throw DataError("failed writing partition tables to " + path.string());
}

PartitionTables PartitionTables::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open partition tables " + path.string());
  char magic[sizeof kTableMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kTableMagic, sizeof magic) != 0) {
    throw DataError(path.string() + " is not a partition table file");
  }
  if (get<std::uint32_t>(is) != kTableVersion) throw DataError("unsupported partition table version");
  PartitionTables t;
  t.n_ = static_cast<int>(get<std::uint32_t>(is));
  if (t.n_ < 1 || t.n_ > kMaxEnumerate) throw DataError("partition table n out of range");
  t.prior_.concentration = get<double>(is);
  t.prior_.discount = get<double>(is);
  const auto count = get<std::uint64_t>(is);
  if (count != bell_number(t.n_)) throw DataError("partition table row count is not B_n");
  t.codes_.resize(count * static_cast<std::size_t>(t.n_));
  is.read(reinterpret_cast<char*>(t.codes_.data()), static_cast<std::streamsize>(t.codes_.size()));
  t.log_prior_.resize(static_cast<Eigen::Index>(count));
  is.read(reinterpret_cast<char*>(t.log_prior_.data()), static_cast<std::streamsize>(sizeof(double) * count));
  if (!is) throw DataError("partition table file is truncated");
  t.build_sparse();
  return t;
}

PartitionTables cached_tables(int n, const CrpParams& prior, const std::filesystem::path& cache_dir) {
  auto bits = [](double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, sizeof u);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(u));
    return std::string(buf);
  };
  const auto file = cache_dir / ("tables-n" + std::to_string(n) + "-a" + bits(prior.concentration) +
                                 "-d" + bits(prior.discount) + ".bin");
  if (std::filesystem::exists(file)) {
    auto t = PartitionTables::load(file);
    if (t.n() == n && t.prior().concentration == prior.concentration &&
        t.prior().discount == prior.discount) {
      return t;
    }
  }
  auto t = build_tables(n, prior);
  std::filesystem::create_directories(cache_dir);
  t.save(file);
  return t;
}

}  // namespace pdiar
