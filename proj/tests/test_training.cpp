#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "pdiar/log.hpp"
#include "pdiar/training.hpp"

using namespace pdiar;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Random model whose precision outputs straddle w, so every parameter group
// gets a gradient of useful size.
DiarizationModel random_model(std::mt19937_64& rng, int d, int r, int q, int h) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  DiarizationModel m;
  m.plda.w = Eigen::VectorXd::NullaryExpr(d, [&] { return std::exp(u(rng)); });
  m.extractor.transform = Eigen::MatrixXd::NullaryExpr(d, r, [&] { return g(rng); });
  m.extractor.net.W1 = Eigen::MatrixXd::NullaryExpr(h, q, [&] { return 0.5 * g(rng); });
  m.extractor.net.b1 = Eigen::VectorXd::NullaryExpr(h, [&] { return 0.5 * g(rng); });
  m.extractor.net.W2 = Eigen::MatrixXd::NullaryExpr(d, h, [&] { return 0.5 * g(rng); });
  m.extractor.net.b2 = Eigen::VectorXd::NullaryExpr(d, [&] { return 0.5 * g(rng); });
  return m;
}

OctetTrial random_trial(std::mt19937_64& rng, int n, int r, int q) {
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> spk(0, 2);
  std::vector<Eigen::VectorXd> centers(3);
  for (auto& c : centers) c = Eigen::VectorXd::NullaryExpr(r, [&] { return g(rng); });
  OctetTrial t;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    labels.push_back(spk(rng));
    t.records.push_back({centers[static_cast<std::size_t>(labels.back())] +
                             0.5 * Eigen::VectorXd::NullaryExpr(r, [&] { return g(rng); }),
                         Eigen::VectorXd::NullaryExpr(q, [&] { return g(rng); }), 1.0});
  }
  t.truth = canonicalize(labels);
  return t;
}

// Direct oracle: score every label string by pooling its clusters.
double oracle_loss(const OctetTrial& trial, const DiarizationModel& m, const CrpParams& prior) {
  std::vector<ProbEmbeddingd> emb;
  for (const auto& r : trial.records) emb.push_back(extract(r, m.extractor));
  const auto all = enumerate_rgs(static_cast<int>(emb.size()));
  Eigen::VectorXd s(static_cast<Eigen::Index>(all.size()));
  double truth_score = 0.0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    double total = crp_log_prob(all[k], prior);
    for (int c = 1; c <= all[k].num_clusters(); ++c) {
      std::vector<ProbEmbeddingd> members;
      for (std::size_t t = 0; t < emb.size(); ++t)
        if (all[k][t] == c) members.push_back(emb[t]);
      total += cluster_loglik(accumulate(members, m.plda));
    }
    s(static_cast<Eigen::Index>(k)) = total;
    if (all[k] == trial.truth) truth_score = total;
  }
  return log_sum_exp(s) - truth_score;
}

Recording make_recording(const std::string& id, const std::vector<std::string>& speakers, int r, int q,
                         std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Recording rec{id, {}};
  for (std::size_t i = 0; i < speakers.size(); ++i) {
    Segment s;
    s.id = "seg-" + std::to_string(i);
    s.start = static_cast<double>(i);
    s.speaker = speakers[i];
    s.record = {Eigen::VectorXd::NullaryExpr(r, [&] { return g(rng); }),
                Eigen::VectorXd::NullaryExpr(q, [&] { return g(rng); }), 1.0};
    s.record.raw(0) = static_cast<double>(i);  // identifies the segment
    rec.segments.push_back(s);
  }
  return rec;
}

double total_norm(const GradientSet& g) {
  const auto& n = g.extractor.net;
  return std::sqrt(g.log_w.squaredNorm() + g.extractor.transform.squaredNorm() + n.W1.squaredNorm() +
                   n.b1.squaredNorm() + n.W2.squaredNorm() + n.b2.squaredNorm());
}

void expect_same_model(const DiarizationModel& a, const DiarizationModel& b) {
  EXPECT_EQ(a.plda.w, b.plda.w);
  EXPECT_EQ(a.extractor.transform, b.extractor.transform);
  EXPECT_EQ(a.extractor.net.W1, b.extractor.net.W1);
  EXPECT_EQ(a.extractor.net.b1, b.extractor.net.b1);
  EXPECT_EQ(a.extractor.net.W2, b.extractor.net.W2);
  EXPECT_EQ(a.extractor.net.b2, b.extractor.net.b2);
}

struct SmallCorpus {
  std::vector<Recording> recs;
  std::vector<const Recording*> train, heldout;
};

SmallCorpus small_corpus(std::mt19937_64& rng) {
  SmallCorpus c;
  const std::vector<std::string> a{"x", "y", "x", "x", "z", "y", "y", "x", "z", "z"};
  for (int i = 0; i < 4; ++i) c.recs.push_back(make_recording("train-" + std::to_string(i), a, 3, 2, rng));
  c.recs.push_back(make_recording("heldout-0", a, 3, 2, rng));
  for (std::size_t i = 0; i < 4; ++i) c.train.push_back(&c.recs[i]);
  c.heldout.push_back(&c.recs[4]);
  return c;
}

}  // namespace

TEST(OctetSampler, SingleRecordingGivesPermutation) {
  std::mt19937_64 rng(1);
  const auto rec = make_recording("train-1", {"a", "b", "a", "c", "c", "b", "a", "a"}, 3, 2, rng);
  OctetSampler sampler({&rec}, 8, Rng(5));
  for (int i = 0; i < 20; ++i) {
    const auto trial = sampler.next();
    std::set<int> ids;
    std::vector<std::string> spk;
    for (const auto& r : trial.records) {
      const int id = static_cast<int>(r.raw(0));
      ids.insert(id);
      spk.push_back(rec.segments[static_cast<std::size_t>(id)].speaker);
    }
    EXPECT_EQ(ids.size(), 8u);
    EXPECT_EQ(trial.truth, canonicalize(spk));
    EXPECT_TRUE(is_restricted_growth(trial.truth.labels()));
  }
}

TEST(OctetSampler, DeterministicAndSkipsShortRecordings) {
  std::mt19937_64 rng(2);
  const auto long_rec = make_recording("train-1", std::vector<std::string>(12, "a"), 3, 2, rng);
  const auto short_rec = make_recording("train-2", std::vector<std::string>(3, "a"), 3, 2, rng);
  std::vector<std::string> warnings;
  const auto old = set_warning_handler([&](std::string_view m) { warnings.emplace_back(m); });
  OctetSampler s1({&long_rec, &short_rec}, 4, Rng(9));
  OctetSampler s2({&long_rec, &short_rec}, 4, Rng(9));
  set_warning_handler(old);
  EXPECT_EQ(warnings.size(), 2u);
  EXPECT_EQ(s1.total_segments(), 12u);
  for (int i = 0; i < 10; ++i) {
    const auto a = s1.next();
    const auto b = s2.next();
    for (int t = 0; t < 4; ++t) EXPECT_EQ(a.records[static_cast<std::size_t>(t)].raw, b.records[static_cast<std::size_t>(t)].raw);
  }
  set_warning_handler([](std::string_view) {});
  EXPECT_THROW(OctetSampler({&short_rec}, 4, Rng(1)), DataError);
  EXPECT_THROW(OctetSampler({}, 4, Rng(1)), DataError);
  set_warning_handler(old);
}

TEST(CrossEntropy, NoEvidenceGivesPriorLoss) {
  std::mt19937_64 rng(3);
  auto m = random_model(rng, 3, 4, 2, 4);
  m.extractor.net.W2.setZero();
  m.extractor.net.b2.setConstant(-1000.0);  // softplus underflows to exactly 0
  const CrpParams prior{1.3, 0.2};
  const auto tables = build_tables(5, prior);
  std::vector<OctetTrial> batch;
  double expected = 0.0;
  for (int i = 0; i < 6; ++i) {
    batch.push_back(random_trial(rng, 5, 4, 2));
    expected -= crp_log_prob(batch.back().truth, prior);
  }
  EXPECT_NEAR(cross_entropy(batch, m, tables), expected / 6, 1e-13);
}

TEST(CrossEntropy, TwoSegmentsUniformPrior) {
  std::mt19937_64 rng(4);
  auto m = random_model(rng, 2, 3, 2, 4);
  m.extractor.net.W2.setZero();
  m.extractor.net.b2.setConstant(-1000.0);
  const auto tables = build_tables(2, CrpParams{1.0, 0.0});  // P([1,1]) = P([1,2]) = 1/2
  const auto trial = random_trial(rng, 2, 3, 2);
  EXPECT_NEAR(cross_entropy(std::span(&trial, 1), m, tables), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, MatchesOracle) {
  std::mt19937_64 rng(5);
  for (int n = 1; n <= 6; ++n) {
    const CrpParams prior{0.7, 0.3};
    const auto tables = build_tables(n, prior);
    for (int trial = 0; trial < 10; ++trial) {
      const auto m = random_model(rng, 3, 4, 2, 5);
      std::vector<OctetTrial> batch{random_trial(rng, n, 4, 2), random_trial(rng, n, 4, 2)};
      const double expected = 0.5 * (oracle_loss(batch[0], m, prior) + oracle_loss(batch[1], m, prior));
      const double got = cross_entropy(batch, m, tables);
      EXPECT_NEAR(got, expected, 1e-10);
      EXPECT_GE(got, 0.0);
      EXPECT_NEAR(loss_and_gradients(batch, m, tables).loss, got, 1e-15);
    }
  }
}

TEST(CrossEntropy, PermutationInvariant) {
  std::mt19937_64 rng(6);
  const auto tables = build_tables(6, {1.0, 0.1});
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_model(rng, 3, 4, 2, 5);
    auto t = random_trial(rng, 6, 4, 2);
    std::vector<int> perm{0, 1, 2, 3, 4, 5};
    std::shuffle(perm.begin(), perm.end(), rng);
    OctetTrial p;
    std::vector<int> labels;
    for (int i : perm) {
      p.records.push_back(t.records[static_cast<std::size_t>(i)]);
      labels.push_back(t.truth[static_cast<std::size_t>(i)]);
    }
    p.truth = canonicalize(labels);
    EXPECT_NEAR(cross_entropy(std::span(&t, 1), m, tables), cross_entropy(std::span(&p, 1), m, tables), 1e-12);
  }
}

TEST(CrossEntropy, ShapeErrors) {
  std::mt19937_64 rng(7);
  const auto m = random_model(rng, 3, 4, 2, 5);
  const auto tables = build_tables(4, {});
  const auto t = random_trial(rng, 5, 4, 2);
  EXPECT_THROW(cross_entropy(std::span(&t, 1), m, tables), ShapeError);
  EXPECT_THROW(cross_entropy(std::span<const OctetTrial>(), m, tables), DataError);
}

class GradientCheckTest : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheckTest, MatchesFiniteDifferences) {
  const int n = GetParam();
  std::mt19937_64 rng(100 + static_cast<unsigned>(n));
  const auto tables = build_tables(n, {1.2, 0.2});
  for (int b = 0; b < 3; ++b) {
    const auto m = random_model(rng, 3, 4, 2, 4);
    std::vector<OctetTrial> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_trial(rng, n, 4, 2));
    const auto report = check_gradients(batch, m, tables);
    for (std::size_t g = 0; g < report.groups.size(); ++g) {
      EXPECT_LT(report.relative_error[g], 1e-5) << report.groups[g] << " n=" << n;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(TupleSizes, GradientCheckTest, ::testing::Values(2, 4, 8));

TEST(Gradients, PlugInPrecisionsGiveZeroNetGradient) {
  std::mt19937_64 rng(8);
  auto m = random_model(rng, 3, 4, 2, 4);
  m.extractor.net.b2.setConstant(1e300);
  const auto tables = build_tables(4, {});
  std::vector<OctetTrial> batch{random_trial(rng, 4, 4, 2)};
  const auto g = gradients(batch, m, tables);
  EXPECT_EQ(g.extractor.net.W2.norm(), 0.0);
  EXPECT_EQ(g.extractor.net.b2.norm(), 0.0);
  EXPECT_GT(g.extractor.transform.norm(), 0.0);
}

TEST(Gradients, ZeroLossIsStationary) {
  // Exact precisions, tiny within-speaker variance and far-apart speakers: the
  // posterior is saturated at the truth.
  const int d = 8;
  DiarizationModel m;
  m.plda.w = Eigen::VectorXd::Constant(d, 1e12);
  m.extractor.transform = Eigen::MatrixXd::Identity(d, d);
  m.extractor.net.W1 = Eigen::MatrixXd::Zero(2, 1);
  m.extractor.net.b1 = Eigen::VectorXd::Zero(2);
  m.extractor.net.W2 = Eigen::MatrixXd::Zero(d, 2);
  m.extractor.net.b2 = Eigen::VectorXd::Constant(d, 1e16);
  std::mt19937_64 rng(21);
  std::bernoulli_distribution coin;
  std::vector<Eigen::VectorXd> centers(3);
  for (auto& c : centers) c = Eigen::VectorXd::NullaryExpr(d, [&] { return coin(rng) ? 5.0 : -5.0; });
  OctetTrial t;
  const std::vector<int> labels{0, 1, 0, 2, 1, 2};
  for (int l : labels) t.records.push_back({centers[static_cast<std::size_t>(l)], Eigen::VectorXd::Zero(1), 1.0});
  t.truth = canonicalize(labels);
  const auto tables = build_tables(6, {});
  const auto lg = loss_and_gradients(std::span(&t, 1), m, tables);
  EXPECT_LT(lg.loss, 1e-12);
  EXPECT_LT(total_norm(lg.grad), 1e-8);
}

TEST(Gradients, IgnoredDimensionHasNoTransformGradient) {
  std::mt19937_64 rng(9);
  auto m = random_model(rng, 3, 4, 2, 5);
  m.extractor.net.W2.row(1).setZero();
  m.extractor.net.b2(1) = -1000.0;
  const auto tables = build_tables(5, {});
  std::vector<OctetTrial> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_trial(rng, 5, 4, 2));
  const auto g = gradients(batch, m, tables);
  EXPECT_EQ(g.extractor.transform.row(1).norm(), 0.0);
  EXPECT_GT(g.extractor.transform.row(0).norm(), 0.0);
}

TEST(Train, ZeroLearningRateLeavesModelUnchanged) {
  std::mt19937_64 rng(10);
  auto c = small_corpus(rng);
  const auto init = random_model(rng, 2, 3, 2, 4);
  TrainConfig cfg;
  cfg.n = 4;
  cfg.batch_size = 5;
  cfg.epochs = 3;
  cfg.lr_net = 0.0;
  cfg.monitor_trials = 20;
  const auto res = train(cfg, init, c.train, c.heldout);
  expect_same_model(res.model, init);
  ASSERT_EQ(res.history.size(), 4u);
  for (const auto& h : res.history) {
    EXPECT_EQ(h.train_loss, res.history.front().train_loss);
    EXPECT_EQ(h.heldout_loss, res.history.front().heldout_loss);
  }
}

TEST(Train, DeterministicGivenSeed) {
  std::mt19937_64 rng(11);
  auto c = small_corpus(rng);
  const auto init = random_model(rng, 2, 3, 2, 4);
  TrainConfig cfg;
  cfg.n = 4;
  cfg.batch_size = 5;
  cfg.epochs = 2;
  cfg.lr_net = 0.1;
  cfg.lr_ratio = 0.5;
  cfg.momentum = 0.5;
  cfg.monitor_trials = 10;
  const auto a = train(cfg, init, c.train, c.heldout);
  const auto b = train(cfg, init, c.train, c.heldout);
  expect_same_model(a.model, b.model);
  EXPECT_NE(a.model.extractor.net.b2, init.extractor.net.b2);
  cfg.seed = 2;
  const auto other = train(cfg, init, c.train, c.heldout);
  EXPECT_NE(other.model.extractor.net.b2, a.model.extractor.net.b2);
}

TEST(Train, FrozenNetOnlyMovesPlda) {
  std::mt19937_64 rng(12);
  auto c = small_corpus(rng);
  const auto init = random_model(rng, 2, 3, 2, 4);
  TrainConfig cfg;
  cfg.n = 4;
  cfg.batch_size = 5;
  cfg.epochs = 2;
  cfg.lr_net = 0.1;
  cfg.lr_ratio = 1.0;
  cfg.train_net = false;
  cfg.monitor_trials = 10;
  const auto res = train(cfg, init, c.train, {});
  EXPECT_EQ(res.model.extractor.net.W1, init.extractor.net.W1);
  EXPECT_EQ(res.model.extractor.net.b2, init.extractor.net.b2);
  EXPECT_NE(res.model.plda.w, init.plda.w);
  EXPECT_NE(res.model.extractor.transform, init.extractor.transform);
  EXPECT_TRUE(std::isnan(res.history.back().heldout_loss));
}

TEST(Train, DivergenceCarriesLastGoodCheckpoint) {
  std::mt19937_64 rng(13);
  auto c = small_corpus(rng);
  const auto init = random_model(rng, 2, 3, 2, 4);
  TrainConfig cfg;
  cfg.n = 4;
  cfg.batch_size = 5;
  cfg.epochs = 3;
  cfg.lr_net = 0.1;
  cfg.monitor_trials = 10;
  // Features this large overflow the cluster statistics.
  for (auto& rec : c.recs) {
    for (auto& seg : rec.segments) seg.record.raw *= 1e200;
  }
  try {
    train(cfg, init, c.train, c.heldout);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_EQ(e.last_good().epoch, 0);
    expect_same_model(e.last_good().model, init);
  }
}

TEST(Train, CheckGatePasses) {
  std::mt19937_64 rng(14);
  auto c = small_corpus(rng);
  const auto init = random_model(rng, 2, 3, 2, 4);
  TrainConfig cfg;
  cfg.n = 4;
  cfg.epochs = 0;
  cfg.check = true;
  cfg.monitor_trials = 5;
  EXPECT_NO_THROW(train(cfg, init, c.train, c.heldout));
}

TEST(Train, RejectsBadConfig) {
  TrainConfig cfg;
  cfg.lr_ratio = 0.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.lr_ratio = 1.5;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.n = 13;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
}

TEST(TrainingPrior, MatchesSpeakerCount) {
  std::mt19937_64 rng(15);
  auto c = small_corpus(rng);
  const auto fit = fit_training_prior(c.train);
  // 4 recordings x 3 speakers over 40 segments.
  EXPECT_NEAR(crp_expected_clusters(40, fit.params), 12.0, 0.06);
}

TEST(ModelIo, RoundTripIsExact) {
  std::mt19937_64 rng(16);
  const auto m = random_model(rng, 3, 5, 2, 6);
  const auto p = std::filesystem::temp_directory_path() / "pdiar_model.txt";
  save_model(p, m);
  expect_same_model(load_model(p), m);
}

TEST(ModelIo, RejectsBadFiles) {
  const auto p = std::filesystem::temp_directory_path() / "pdiar_model_bad.txt";
  std::mt19937_64 rng(17);
  auto params = to_parameters(random_model(rng, 3, 5, 2, 6));
  params.erase("net.b1");
  write_parameters(p, "model", params);
  EXPECT_THROW(load_model(p), ParseError);
  params = to_parameters(random_model(rng, 3, 5, 2, 6));
  params.emplace("bogus", Eigen::MatrixXd::Zero(1, 1));
  write_parameters(p, "model", params);
  EXPECT_THROW(load_model(p), ParseError);
  params = to_parameters(random_model(rng, 3, 5, 2, 6));
  params["plda.w"] = Eigen::VectorXd::Ones(2);
  write_parameters(p, "model", params);
  EXPECT_THROW(load_model(p), ParseError);
  write_parameters(p, "checkpoint", to_parameters(random_model(rng, 3, 5, 2, 6)));
  EXPECT_THROW(load_model(p), ParseError);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(18);
  Checkpoint c;
  c.model = random_model(rng, 3, 4, 2, 5);
  c.velocity = GradientSet::zeros_like(c.model);
  c.velocity.log_w.setConstant(-0.25);
  c.velocity.extractor.net.W2.setConstant(1e-7);
  c.prior = {2.5, 0.35};
  c.epoch = 17;
  const auto p = std::filesystem::temp_directory_path() / "pdiar_ckpt.txt";
  save_checkpoint(p, c);
  const auto back = load_checkpoint(p);
  expect_same_model(back.model, c.model);
  EXPECT_EQ(back.velocity.log_w, c.velocity.log_w);
  EXPECT_EQ(back.velocity.extractor.net.W2, c.velocity.extractor.net.W2);
  EXPECT_EQ(back.prior.concentration, 2.5);
  EXPECT_EQ(back.prior.discount, 0.35);
  EXPECT_EQ(back.epoch, 17);
}
