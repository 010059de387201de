#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "pdiar/errors.hpp"
#include "pdiar/log.hpp"
#include "pdiar/partitions.hpp"
#include "pdiar/plda.hpp"

using namespace pdiar;

namespace {

// Every string in {1..n}^n, in lexicographic order, filtered by the growth rule.
std::vector<std::vector<int>> brute_force_rgs(int n) {
  std::vector<std::vector<int>> out;
  std::vector<int> s(n, 1);
  while (true) {
    bool ok = s[0] == 1;
    int mx = 0;
    for (int t = 0; t < n && ok; ++t) {
      if (s[t] > mx + 1) ok = false;
      mx = std::max(mx, s[t]);
    }
    if (ok) out.push_back(s);
    int i = n - 1;
    while (i >= 0 && s[i] == n) s[i--] = 1;
    if (i < 0) break;
    ++s[i];
  }
  return out;
}

// Closed-form Pitman-Yor exchangeable partition probability.
double eppf(const std::vector<int>& labels, double a, double d) {
  std::vector<int> sizes;
  for (int l : labels) {
    if (l > static_cast<int>(sizes.size())) sizes.resize(l, 0);
    ++sizes[l - 1];
  }
  const int n = static_cast<int>(labels.size());
  const int k = static_cast<int>(sizes.size());
  double p = 1.0;
  for (int i = 1; i < k; ++i) p *= a + i * d;
  for (int i = 1; i < n; ++i) p /= a + i;
  for (int s : sizes) {
    for (int j = 1; j < s; ++j) p *= j - d;
  }
  return p;
}

Eigen::MatrixXi comembership(std::span<const int> labels) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  Eigen::MatrixXi m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = labels[i] == labels[j];
  return m;
}

std::vector<int> to_vec(const LabelString& l) { return {l.begin(), l.end()}; }

}  // namespace

TEST(BellNumber, KnownValues) {
  EXPECT_EQ(bell_number(1), 1u);
  EXPECT_EQ(bell_number(3), 5u);
  EXPECT_EQ(bell_number(8), 4140u);
  EXPECT_EQ(bell_number(16), 10480142147ull);
}

TEST(BellNumber, MatchesBruteForceCount) {
  for (int n = 1; n <= 7; ++n) EXPECT_EQ(bell_number(n), brute_force_rgs(n).size()) << n;
}

TEST(BellNumber, RejectsOutOfRange) {
  EXPECT_THROW(bell_number(0), SizeError);
  EXPECT_THROW(bell_number(17), SizeError);
}

TEST(EnumerateRgs, SmallCases) {
  const auto three = enumerate_rgs(3);
  const std::vector<std::vector<int>> expected{{1, 1, 1}, {1, 1, 2}, {1, 2, 1}, {1, 2, 2}, {1, 2, 3}};
  ASSERT_EQ(three.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(to_vec(three[i]), expected[i]);
  ASSERT_EQ(enumerate_rgs(1).size(), 1u);
  EXPECT_EQ(to_vec(enumerate_rgs(1)[0]), std::vector<int>{1});
  EXPECT_EQ(enumerate_rgs(8).size(), 4140u);
}

TEST(EnumerateRgs, EqualsExhaustiveFilter) {
  for (int n = 1; n <= 6; ++n) {
    const auto got = enumerate_rgs(n);
    const auto want = brute_force_rgs(n);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_EQ(to_vec(got[i]), want[i]);
  }
}

TEST(EnumerateRgs, CountMatchesBellUpTo10) {
  for (int n = 1; n <= 10; ++n) {
    std::uint64_t count = 0;
    for_each_rgs(n, [&](std::span<const int>) { ++count; });
    EXPECT_EQ(count, bell_number(n));
  }
  EXPECT_THROW(enumerate_rgs(13), SizeError);
  EXPECT_THROW(enumerate_rgs(0), SizeError);
}

TEST(LabelString, Validation) {
  EXPECT_NO_THROW(LabelString::from_labels({1, 2, 1, 3}));
  EXPECT_THROW(LabelString::from_labels({2, 1}), DomainError);
  EXPECT_THROW(LabelString::from_labels({1, 3}), DomainError);
  EXPECT_THROW(LabelString::from_labels({}), DomainError);
  EXPECT_EQ(LabelString::from_labels({1, 2, 2}).num_clusters(), 2);
  EXPECT_EQ(LabelString::from_labels({1, 2, 2}).str(), "1,2,2");
}

TEST(Canonicalize, Examples) {
  EXPECT_EQ(to_vec(canonicalize(std::vector<int>{7, 7, 2})), (std::vector<int>{1, 1, 2}));
  EXPECT_EQ(to_vec(canonicalize(std::vector<int>{1, 2, 3})), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(to_vec(canonicalize(std::vector<int>{2, 1, 2, 1})), (std::vector<int>{1, 2, 1, 2}));
  EXPECT_EQ(to_vec(canonicalize(std::vector<std::string>{"bob", "amy", "bob"})), (std::vector<int>{1, 2, 1}));
}

TEST(Canonicalize, IdempotentAndPartitionPreserving) {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12);
    std::vector<int> raw(n);
    for (auto& v : raw) v = static_cast<int>(rng() % 6) - 2;
    const auto c = canonicalize(raw);
    EXPECT_TRUE(is_restricted_growth(c.labels()));
    EXPECT_EQ(canonicalize(to_vec(c)), c);
    EXPECT_EQ(comembership(raw), comembership(c.labels()));
  }
}

TEST(Crp, TwoCustomerExamples) {
  const CrpParams p{1.0, 0.0};
  EXPECT_NEAR(crp_log_prob(LabelString::from_labels({1, 1}), p), std::log(0.5), 1e-15);
  EXPECT_NEAR(crp_log_prob(LabelString::from_labels({1, 2}), p), std::log(0.5), 1e-15);
}

TEST(Crp, MatchesClosedFormEppf) {
  for (double a : {0.3, 1.0, 4.0}) {
    for (double d : {0.0, 0.25, 0.7}) {
      for (const auto& l : enumerate_rgs(5)) {
        EXPECT_NEAR(crp_log_prob(l, {a, d}), std::log(eppf(to_vec(l), a, d)), 1e-12);
      }
    }
  }
}

TEST(Crp, SumsToOneExhaustively) {
  double total = 0.0;
  for (const auto& l : enumerate_rgs(4)) total += std::exp(crp_log_prob(l, {0.7, 0.3}));
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Crp, ExchangeableUnderPermutation) {
  std::mt19937 rng(11);
  for (int n = 1; n <= 6; ++n) {
    for (const auto& l : enumerate_rgs(n)) {
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<int> permuted(n);
      for (int t = 0; t < n; ++t) permuted[t] = l[perm[t]];
      const CrpParams p{0.9, 0.4};
      EXPECT_NEAR(crp_log_prob(canonicalize(permuted), p), crp_log_prob(l, p), 1e-12);
    }
  }
}

TEST(Crp, InvalidParams) {
  const auto l = LabelString::from_labels({1, 2});
  EXPECT_THROW(crp_log_prob(l, {-1.0, 0.0}), DomainError);
  EXPECT_THROW(crp_log_prob(l, {1.0, 1.0}), DomainError);
  EXPECT_THROW(crp_log_prob(l, {0.0, 0.0}), DomainError);
  EXPECT_NO_THROW(crp_log_prob(l, {0.0, 0.5}));
}

TEST(Crp, MomentsMatchExhaustiveEnumeration) {
  for (const CrpParams p : {CrpParams{0.5, 0.0}, CrpParams{2.0, 0.3}, CrpParams{0.0, 0.6}}) {
    double m1 = 0, m2 = 0;
    for (const auto& l : enumerate_rgs(7)) {
      const double pr = std::exp(crp_log_prob(l, p));
      m1 += pr * l.num_clusters();
      m2 += pr * l.num_clusters() * l.num_clusters();
    }
    EXPECT_NEAR(crp_expected_clusters(7, p), m1, 1e-12);
    EXPECT_NEAR(crp_cluster_variance(7, p), m2 - m1 * m1, 1e-11);
  }
}

namespace {

// Monte Carlo of the cluster count process, independent of the recurrences.
std::pair<double, double> simulate_clusters(int n, const CrpParams& p, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double s1 = 0, s2 = 0;
  for (int i = 0; i < samples; ++i) {
    int k = 1;
    for (int t = 1; t < n; ++t) {
      if (u(rng) < (p.concentration + k * p.discount) / (p.concentration + t)) ++k;
    }
    s1 += k;
    s2 += static_cast<double>(k) * k;
  }
  const double mean = s1 / samples;
  return {mean, s2 / samples - mean * mean};
}

}  // namespace

TEST(FitCrp, ReproducesExpectedCountByMonteCarlo) {
  const auto fit = fit_crp(8, 3.0);
  EXPECT_FALSE(fit.clipped);
  EXPECT_NEAR(fit.expected_clusters, 3.0, 0.005 * 3.0);
  const auto [mean, var] = simulate_clusters(8, fit.params, 1'000'000, 2024);
  EXPECT_NEAR(mean, 3.0, 0.015);
  EXPECT_NEAR(var, fit.variance, 0.02 * fit.variance);
}

TEST(FitCrp, VarianceIsMaximalOverDiscountGrid) {
  const int n = 200;
  const double target = 12.0;
  const auto fit = fit_crp(n, target);
  EXPECT_NEAR(crp_expected_clusters(n, fit.params), target, 0.005 * target);
  // Re-solve each grid point independently with a coarse scan + secant polish.
  for (int g = 0; g < 20; ++g) {
    const double d = 0.05 * g;
    double lo = d > 0 ? 0.0 : 1e-12, hi = 1e8;
    if (crp_expected_clusters(n, {lo, d}) > target) continue;
    for (int it = 0; it < 300; ++it) {
      const double mid = 0.5 * (lo + hi);
      (crp_expected_clusters(n, {mid, d}) < target ? lo : hi) = mid;
    }
    EXPECT_LE(crp_cluster_variance(n, {lo, d}), fit.variance * (1 + 1e-9)) << d;
  }
}

TEST(FitCrp, DegenerateLimits) {
  const auto one = fit_crp(100, 1.0);
  EXPECT_EQ(one.params.discount, 0.0);
  EXPECT_LE(one.params.concentration, 1e-9);
  EXPECT_NEAR(one.expected_clusters, 1.0, 0.005);

  int warnings = 0;
  auto previous = set_warning_handler([&](std::string_view) { ++warnings; });
  const auto all = fit_crp(8, 8.0);
  set_warning_handler(previous);
  EXPECT_EQ(warnings, 1);
  EXPECT_TRUE(all.clipped);
  EXPECT_EQ(all.params.concentration, kCrpMaxConcentration);
  EXPECT_NEAR(all.expected_clusters, 8.0, 0.005 * 8.0);

  EXPECT_THROW(fit_crp(8, 0.5), DomainError);
  EXPECT_THROW(fit_crp(8, 9.0), DomainError);
}

TEST(PartitionTables, PairTableLayout) {
  const auto t = build_tables(2, {1.0, 0.0});
  Eigen::MatrixXd want(2, 3);
  want << 1, 0, 1,
          0, 1, 1;
  EXPECT_EQ(t.seg_subset().to_dense(), want);
  EXPECT_EQ(t.size(), 2u);
}

TEST(PartitionTables, OctetSizeAndNormalization) {
  const auto t = build_tables(8, {1.3, 0.2});
  EXPECT_EQ(t.part_subset().rows(), 4140u);
  EXPECT_EQ(t.part_subset().cols(), 255u);
  EXPECT_NEAR(log_sum_exp(t.log_prior()), 0.0, 1e-10);
  const auto three = build_tables(3, {1.0, 0.0});
  EXPECT_NEAR(three.log_prior().array().exp().sum(), 1.0, 1e-12);
}

TEST(PartitionTables, RowsSelectClustersOfEachPartition) {
  const auto t = build_tables(5, {0.8, 0.1});
  const auto all = enumerate_rgs(5);
  const Eigen::MatrixXd seg = t.seg_subset().to_dense();
  for (std::size_t r = 0; r < t.size(); ++r) {
    EXPECT_EQ(t.rgs(r), all[r]);
    EXPECT_DOUBLE_EQ(t.log_prior()(static_cast<Eigen::Index>(r)), crp_log_prob(all[r], t.prior()));
    const auto cols = t.part_subset().row(r);
    ASSERT_EQ(static_cast<int>(cols.size()), all[r].num_clusters());
    for (int k = 1; k <= all[r].num_clusters(); ++k) {
      Eigen::VectorXd indicator(5);
      for (int s = 0; s < 5; ++s) indicator(s) = all[r][s] == k;
      const bool found = std::any_of(cols.begin(), cols.end(),
                                     [&](auto c) { return seg.col(c) == indicator; });
      EXPECT_TRUE(found) << all[r].str() << " cluster " << k;
    }
  }
}

TEST(PartitionTables, IndexOfInvertsRgs) {
  for (int n = 1; n <= 7; ++n) {
    const auto t = build_tables(n, {1.0, 0.0});
    for (std::size_t r = 0; r < t.size(); ++r) ASSERT_EQ(t.index_of(t.rgs(r)), r);
  }
  const auto t = build_tables(3, {1.0, 0.0});
  EXPECT_THROW(t.index_of(LabelString::from_labels({1, 2})), ShapeError);
}

TEST(PartitionTables, SegSubsetProductGivesSubsetSums) {
  const auto t = build_tables(6, {1.0, 0.0});
  std::mt19937 rng(3);
  std::normal_distribution<double> g;
  Eigen::MatrixXd values(6, 3);
  for (Eigen::Index i = 0; i < values.size(); ++i) values(i) = g(rng);
  const Eigen::MatrixXd sums = t.seg_subset().transpose_multiply(values);
  for (std::size_t mask = 1; mask < 64; ++mask) {
    Eigen::RowVectorXd direct = Eigen::RowVectorXd::Zero(3);
    for (int s = 0; s < 6; ++s)
      if (mask & (1u << s)) direct += values.row(s);
    EXPECT_LT((sums.row(static_cast<Eigen::Index>(mask - 1)) - direct).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(PartitionTables, RejectsLargeN) {
  EXPECT_THROW(build_tables(13, {1.0, 0.0}), SizeError);
  EXPECT_THROW(build_tables(0, {1.0, 0.0}), SizeError);
}

TEST(PartitionTables, CacheIsTransparent) {
  const auto dir = std::filesystem::temp_directory_path() / "pdiar_table_cache_test";
  std::filesystem::remove_all(dir);
  const CrpParams prior{0.37, 0.15};
  const auto direct = build_tables(7, prior);
  const auto first = cached_tables(7, prior, dir);   // builds and stores
  const auto second = cached_tables(7, prior, dir);  // loads
  EXPECT_TRUE(direct == first);
  EXPECT_TRUE(direct == second);
  ASSERT_EQ(std::distance(std::filesystem::directory_iterator(dir), {}), 1);

  const auto file = std::filesystem::directory_iterator(dir)->path();
  const auto again = dir / "again.bin";
  second.save(again);
  std::ifstream a(file, std::ios::binary), b(again, std::ios::binary);
  EXPECT_TRUE(std::equal(std::istreambuf_iterator<char>(a), std::istreambuf_iterator<char>(),
                         std::istreambuf_iterator<char>(b), std::istreambuf_iterator<char>()));
  std::filesystem::remove_all(dir);
}
