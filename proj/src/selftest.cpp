#include "pdiar/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "pdiar/clustering.hpp"
#include "pdiar/evalkit.hpp"
#include "pdiar/partitions.hpp"
#include "pdiar/plda.hpp"
#include "pdiar/training.hpp"

namespace pdiar {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

ProbEmbeddingd random_embedding(Rng& rng, int dim) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  ProbEmbeddingd e;
  e.xhat = Eigen::VectorXd::NullaryExpr(dim, [&] { return 1.5 * g(rng); });
  e.prec = Eigen::VectorXd::NullaryExpr(dim, [&] { return std::exp(2 * u(rng)); });
  return e;
}

DiagPldad random_plda(Rng& rng, int dim) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  return {Eigen::VectorXd::NullaryExpr(dim, [&] { return std::exp(u(rng)); })};
}

std::vector<ProbEmbeddingd> random_tuple(Rng& rng, int n, int dim) {
  std::vector<ProbEmbeddingd> t;
  for (int i = 0; i < n; ++i) t.push_back(random_embedding(rng, dim));
  return t;
}

double pooled_loglik(const LabelString& labels, int k, const std::vector<ProbEmbeddingd>& tuple,
                     const DiagPldad& plda) {
  std::vector<ProbEmbeddingd> members;
  for (std::size_t t = 0; t < labels.size(); ++t)
    if (labels[t] == k) members.push_back(tuple[t]);
  return cluster_loglik(accumulate(members, plda));
}

// Scores every label string independently by pooling its clusters.
Eigen::VectorXd brute_force_posterior(const std::vector<ProbEmbeddingd>& tuple, const DiagPldad& plda,
                                      const CrpParams& prior) {
  const auto all = enumerate_rgs(static_cast<int>(tuple.size()));
  Eigen::VectorXd s(static_cast<Eigen::Index>(all.size()));
  for (std::size_t r = 0; r < all.size(); ++r) {
    double total = crp_log_prob(all[r], prior);
    for (int k = 1; k <= all[r].num_clusters(); ++k) total += pooled_loglik(all[r], k, tuple, plda);
    s(static_cast<Eigen::Index>(r)) = total;
  }
  const double m = s.maxCoeff();
  return s.array() - (m + std::log((s.array() - m).exp().sum()));
}

// Pitman-Yor E[K_n] from the gamma-function closed form.
double closed_form_expected_clusters(int n, const CrpParams& p) {
  const double a = p.concentration, d = p.discount;
  if (d == 0.0) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a / (a + i);
    return s;
  }
  const double log_ratio = std::lgamma(a + d + n) + std::lgamma(a + 1) - std::lgamma(a + n) - std::lgamma(a + d);
  return std::exp(log_ratio) / d - a / d;
}

CheckResult finish(CheckResult r, Clock::time_point t0) {
  r.seconds = since(t0);
  return r;
}

}  // namespace

CheckResult check_partition_counts() {
  const auto t0 = Clock::now();
  CheckResult r{1, "partition counts", true, "", 0.0};
  for (int n = 1; n <= 10; ++n) {
    const auto count = enumerate_rgs(n).size();
    if (count != bell_number(n)) {
      r.pass = false;
      r.detail += "n=" + std::to_string(n) + " enumerated " + std::to_string(count) + "; ";
    }
  }
  const auto b8 = enumerate_rgs(8).size();
  if (b8 != 4140 || bell_number(8) != 4140) r.pass = false;
  r.seconds = since(t0);
  if (r.seconds >= 1.0) r.pass = false;
  r.detail += "B8 = " + std::to_string(b8) + ", B10 = " + std::to_string(bell_number(10)) + ", limit 1 s";
  return r;
}

CheckResult check_posterior_oracle() {
  const auto t0 = Clock::now();
  CheckResult r{2, "posterior vs brute force", true, "", 0.0};
  Rng rng = substream(2, "selftest");
  const CrpParams prior{1.3, 0.25};
  double worst = 0.0;
  for (int n = 2; n <= 6; ++n) {
    const auto tables = build_tables(n, prior);
    for (int trial = 0; trial < 200; ++trial) {
      const int dim = 1 + trial % 4;
      const auto plda = random_plda(rng, dim);
      const auto tuple = random_tuple(rng, n, dim);
      const Eigen::VectorXd fast = clustering_log_posterior(tuple, plda, tables);
      const Eigen::VectorXd slow = brute_force_posterior(tuple, plda, prior);
      worst = std::max(worst, (fast - slow).cwiseAbs().maxCoeff());
    }
  }
  r.seconds = since(t0);
  r.pass = worst < 1e-10 && r.seconds < 30.0;
  r.detail = "max |log-posterior difference| " + fmt(worst) + " (tol 1e-10), limit 30 s";
  return r;
}

CheckResult check_uncertainty_limits() {
  const auto t0 = Clock::now();
  CheckResult r{3, "uncertainty limits", true, "", 0.0};
  Rng rng = substream(3, "selftest");
  const CrpParams prior{1.0, 0.1};
  double worst_prior = 0.0, worst_tv = 0.0;
  for (int n = 2; n <= 8; ++n) {
    const auto tables = build_tables(n, prior);
    for (int trial = 0; trial < 10; ++trial) {
      const auto plda = random_plda(rng, 4);
      auto tuple = random_tuple(rng, n, 4);
      auto blind = tuple, sharp = tuple, plug = tuple;
      for (std::size_t t = 0; t < tuple.size(); ++t) {
        blind[t].prec.setZero();
        sharp[t].prec = 1e12 * plda.w;
        plug[t].prec.setConstant(kInf);
      }
      const Eigen::VectorXd post0 = clustering_log_posterior(blind, plda, tables);
      // Exact up to rounding: a few ulps of the log prior itself.
      const Eigen::ArrayXd scale = tables.log_prior().array().abs().max(1.0);
      worst_prior = std::max(worst_prior, ((post0 - tables.log_prior()).array().abs() / scale).maxCoeff());
      const Eigen::VectorXd p = clustering_log_posterior(sharp, plda, tables).array().exp();
      const Eigen::VectorXd q = clustering_log_posterior(plug, plda, tables).array().exp();
      worst_tv = std::max(worst_tv, 0.5 * (p - q).cwiseAbs().sum());
    }
  }
  r.pass = worst_prior <= 1e-14 && worst_tv < 1e-6;
  r.detail = "prec=0: max relative |post - prior| " + fmt(worst_prior) + " (tol 1e-14); prec=1e12 w: max TV " +
             fmt(worst_tv) + " (tol 1e-6)";
  return finish(r, t0);
}

CheckResult check_gradients() {
  const auto t0 = Clock::now();
  CheckResult r{4, "gradient check", true, "", 0.0};
  Rng rng = substream(4, "selftest");
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> spk(0, 2);
  constexpr int d = 8, raw = 8, q = 3, h = 6, batch_size = 4;
  double worst = 0.0;
  std::string worst_group;
  for (int n : {4, 8}) {
    const auto tables = build_tables(n, {1.2, 0.2});
    for (int b = 0; b < 10; ++b) {
      DiarizationModel m;
      m.plda.w = Eigen::VectorXd::NullaryExpr(d, [&] { return std::exp(u(rng)); });
      m.extractor.transform = Eigen::MatrixXd::NullaryExpr(d, raw, [&] { return g(rng) / std::sqrt(raw); });
      m.extractor.net.W1 = Eigen::MatrixXd::NullaryExpr(h, q, [&] { return 0.5 * g(rng); });
      m.extractor.net.b1 = Eigen::VectorXd::NullaryExpr(h, [&] { return 0.5 * g(rng); });
      m.extractor.net.W2 = Eigen::MatrixXd::NullaryExpr(d, h, [&] { return 0.5 * g(rng); });
      m.extractor.net.b2 = Eigen::VectorXd::NullaryExpr(d, [&] { return 0.5 * g(rng); });
      std::vector<OctetTrial> batch;
      for (int i = 0; i < batch_size; ++i) {
        std::vector<Eigen::VectorXd> centers(3);
        for (auto& c : centers) c = Eigen::VectorXd::NullaryExpr(raw, [&] { return g(rng); });
        OctetTrial t;
        std::vector<int> labels;
        for (int k = 0; k < n; ++k) {
          labels.push_back(spk(rng));
          t.records.push_back({centers[static_cast<std::size_t>(labels.back())] +
                                   0.5 * Eigen::VectorXd::NullaryExpr(raw, [&] { return g(rng); }),
                               Eigen::VectorXd::NullaryExpr(q, [&] { return g(rng); }), 1.0});
        }
        t.truth = canonicalize(labels);
        batch.push_back(std::move(t));
      }
      const auto report = pdiar::check_gradients(batch, m, tables);
      for (std::size_t k = 0; k < report.groups.size(); ++k) {
        if (report.relative_error[k] > worst) {
          worst = report.relative_error[k];
          worst_group = report.groups[k] + " n=" + std::to_string(n);
        }
      }
    }
  }
  r.seconds = since(t0);
  r.pass = worst < 1e-5 && r.seconds < 120.0;
  r.detail = "worst relative error " + fmt(worst) + " (" + worst_group + ", tol 1e-5), limit 120 s";
  return r;
}

CheckResult check_crp() {
  const auto t0 = Clock::now();
  CheckResult r{5, "CRP prior", true, "", 0.0};
  double worst_sum = 0.0;
  for (int n = 1; n <= 6; ++n) {
    const auto all = enumerate_rgs(n);
    for (double a : {0.05, 0.5, 1.0, 3.0, 20.0}) {
      for (double d : {0.0, 0.2, 0.5, 0.9}) {
        double s = 0.0;
        for (const auto& l : all) s += std::exp(crp_log_prob(l, {a, d}));
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
  }
  struct Target {
    int n;
    double k;
  };
  double worst_fit = 0.0;
  for (const Target t : {Target{8, 2.5}, Target{40, 3.0}, Target{400, 12.0}, Target{3000, 150.0},
                         Target{10000, 2.0}}) {
    const auto fit = fit_crp(t.n, t.k);
    const double got = closed_form_expected_clusters(t.n, fit.params);
    worst_fit = std::max(worst_fit, std::abs(got - t.k) / t.k);
  }
  r.pass = worst_sum <= 1e-12 && worst_fit <= 0.005;
  r.detail = "max |sum - 1| " + fmt(worst_sum) + " (tol 1e-12); worst fitted E[K] error " + fmt(100 * worst_fit) +
             "% (tol 0.5%)";
  return finish(r, t0);
}

CheckResult check_by_the_book() {
  const auto t0 = Clock::now();
  CheckResult r{6, "by-the-book AHC", true, "", 0.0};
  Rng rng = substream(6, "selftest");
  std::normal_distribution<double> g;
  int nonincreasing = 0, above_optimum = 0;
  double worst_recompute = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = trial < 200 ? 2 + trial % 5 : 10 + trial % 11;
    const int dim = 1 + trial % 5;
    const auto plda = random_plda(rng, dim);
    // A few speakers so that some merges are worth taking.
    std::vector<Eigen::VectorXd> centers(3);
    for (auto& c : centers) c = Eigen::VectorXd::NullaryExpr(dim, [&] { return 1.5 * g(rng); });
    std::vector<ProbEmbeddingd> emb;
    for (int t = 0; t < n; ++t) {
      auto e = random_embedding(rng, dim);
      e.xhat = centers[static_cast<std::size_t>(t % 3)] + e.xhat / 3.0;
      emb.push_back(std::move(e));
    }
    const auto trace = by_the_book_trace(emb, plda);
    ClusterState state(emb, plda, 1.0);
    double total = state.total_loglik();
    for (const auto& m : trace.merges) {
      std::vector<ProbEmbeddingd> a, b;
      for (int i : state.members(m.keep)) a.push_back(emb[static_cast<std::size_t>(i)]);
      for (int i : state.members(m.absorbed)) b.push_back(emb[static_cast<std::size_t>(i)]);
      auto ab = a;
      ab.insert(ab.end(), b.begin(), b.end());
      const double scratch = cluster_loglik(accumulate(ab, plda)) - cluster_loglik(accumulate(a, plda)) -
                             cluster_loglik(accumulate(b, plda));
      worst_recompute = std::max(worst_recompute, std::abs(scratch - m.score));
      if (!(m.score > 0.0)) break;  // sigma = 0 stops here
      state.merge(m.keep, m.absorbed);
      const double next = state.total_loglik();
      if (!(next > total)) ++nonincreasing;
      total = next;
    }
    if (!(state.labels() == cut(trace, 0.0, true))) ++nonincreasing;
    if (n <= 6) {
      double best = -kInf;
      for (const auto& l : enumerate_rgs(n)) {
        double s = 0.0;
        for (int k = 1; k <= l.num_clusters(); ++k) s += pooled_loglik(l, k, emb, plda);
        best = std::max(best, s);
      }
      if (total > best + 1e-9) ++above_optimum;
    }
  }
  r.pass = nonincreasing == 0 && above_optimum == 0 && worst_recompute <= 1e-9;
  r.detail = std::to_string(nonincreasing) + " non-increasing merges, " + std::to_string(above_optimum) +
             " runs above the exhaustive optimum, max recomputation error " + fmt(worst_recompute) + " (tol 1e-9)";
  return finish(r, t0);
}

CheckResult check_der_scorer() {
  const auto t0 = Clock::now();
  CheckResult r{9, "DER scorer", true, "", 0.0};
  const Timeline ref{"rec", {{0.0, 5.0, "A"}, {5.0, 5.0, "B"}}};
  const Timeline one{"rec", {{0.0, 10.0, "X"}}};
  const Timeline swapped{"rec", {{0.0, 5.0, "B"}, {5.0, 5.0, "A"}}};
  int bad_examples = 0;
  for (bool exact : {false, true}) {
    DerOptions o;
    o.exact = exact;
    if (der(ref, ref, o).der() != 0.0) ++bad_examples;
    if (der(ref, one, o).der() != 0.5 || der(ref, one, o).confusion_rate() != 0.5) ++bad_examples;
    if (der(ref, swapped, o).der() != 0.0) ++bad_examples;
  }
  Rng rng = substream(9, "selftest");
  std::uniform_real_distribution<double> len(0.2, 3.0);
  std::uniform_int_distribution<int> pick(0, 4);
  std::bernoulli_distribution overlap(0.2);
  int not_invariant = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Timeline ref_t{"fuzz", {}}, hyp_t{"fuzz", {}}, renamed{"fuzz", {}};
    double t = 0.0;
    for (int k = 0; k < 12; ++k) {
      const double d = len(rng);
      ref_t.turns.push_back({t, d, "r" + std::to_string(pick(rng))});
      if (overlap(rng)) ref_t.turns.push_back({t + d / 2, d, "r" + std::to_string(pick(rng))});
      t += d;
    }
    t = 0.0;
    std::vector<std::string> names{"h0", "h1", "h2", "h3", "h4"};
    std::vector<std::string> perm = names;
    std::shuffle(perm.begin(), perm.end(), rng);
    while (t < 15.0) {
      const double d = len(rng);
      const int s = pick(rng);
      hyp_t.turns.push_back({t, d, names[static_cast<std::size_t>(s)]});
      renamed.turns.push_back({t, d, "x" + perm[static_cast<std::size_t>(s)]});
      t += d;
    }
    DerOptions o;
    o.exact = trial % 2 == 0;
    const auto a = der(ref_t, hyp_t, o), b = der(ref_t, renamed, o);
    if (std::abs(a.errors() - b.errors()) > 1e-9) ++not_invariant;
  }
  r.pass = bad_examples == 0 && not_invariant == 0;
  r.detail = std::to_string(bad_examples) + " failing examples, " + std::to_string(not_invariant) +
             " of 100 relabelings changed the error time";
  return finish(r, t0);
}

std::vector<CheckResult> run_fast_checks() {
  return {check_partition_counts(), check_posterior_oracle(), check_uncertainty_limits(), check_gradients(),
          check_crp(),              check_by_the_book(),      check_der_scorer()};
}

std::vector<ExperimentResult> run_seeded_experiments(const std::vector<std::uint64_t>& seeds, int jobs,
                                                     const std::function<void(const std::string&)>& progress) {
  std::vector<ExperimentResult> out;
  for (auto seed : seeds) {
    ExperimentConfig cfg;
    cfg.set_seed(seed);
    cfg.jobs = jobs;
    out.push_back(run_experiment(cfg, [&](const std::string& m) {
      if (progress) progress("seed " + std::to_string(seed) + ": " + m);
    }));
  }
  return out;
}

namespace {

double mean_over(const std::vector<ExperimentResult>& runs, const std::string& system,
                 double (*get)(const SystemResult&)) {
  double s = 0.0;
  for (const auto& run : runs) s += get(run.system(system));
  return s / static_cast<double>(runs.size());
}

}  // namespace

CheckResult check_system_ordering(const std::vector<ExperimentResult>& runs, double seconds) {
  CheckResult r{7, "system ordering", false, "", seconds};
  if (runs.empty()) {
    r.detail = "no runs";
    return r;
  }
  auto eval = [](const SystemResult& s) { return s.sigma_tuned.eval_der; };
  const double base = mean_over(runs, "baseline", eval);
  const double untrained = mean_over(runs, "untrained", eval);
  const double plda = mean_over(runs, "plda-trained", eval);
  const double full = mean_over(runs, "trained", eval);
  const bool full_beats_plda = full < plda;
  const bool plda_beats_untrained = plda < untrained;
  const bool untrained_near_base = std::abs(untrained - base) <= 0.25 * base;
  const bool ten_percent = full <= 0.9 * base;
  const bool in_time = seconds < 900.0;
  r.pass = full_beats_plda && plda_beats_untrained && untrained_near_base && ten_percent && in_time;
  auto mark = [](bool ok) { return ok ? "ok" : "FAILS"; };
  r.detail = "mean tuned eval DER % over " + std::to_string(runs.size()) + " seeds: trained " + fmt(100 * full, 4) +
             ", plda-trained " + fmt(100 * plda, 4) + ", untrained " + fmt(100 * untrained, 4) + ", baseline " +
             fmt(100 * base, 4) + "; trained<plda " + mark(full_beats_plda) + ", plda<untrained " +
             mark(plda_beats_untrained) + ", untrained~baseline within 25% " + mark(untrained_near_base) +
             ", trained >=10% better than baseline " + mark(ten_percent) + ", limit 900 s " + mark(in_time);
  return r;
}

CheckResult check_calibration_drift(const std::vector<ExperimentResult>& runs) {
  CheckResult r{8, "calibration drift", false, "", 0.0};
  if (runs.empty()) {
    r.detail = "no runs";
    return r;
  }
  auto sigma = [](const SystemResult& s) { return s.sigma_tuned.value; };
  auto scale = [](const SystemResult& s) { return s.scale_tuned.value; };
  const double sigma_u = mean_over(runs, "untrained", sigma), sigma_t = mean_over(runs, "trained", sigma);
  const double scale_u = mean_over(runs, "untrained", scale), scale_t = mean_over(runs, "trained", scale);
  const bool sigma_ok = std::abs(sigma_t) < std::abs(sigma_u);
  const bool scale_ok = std::abs(scale_t - 1.0) < std::abs(scale_u - 1.0);
  r.pass = sigma_ok && scale_ok;
  r.detail = "mean dev-optimal sigma: untrained " + fmt(sigma_u, 4) + ", trained " + fmt(sigma_t, 4) +
             "; mean dev-optimal scale: untrained " + fmt(scale_u, 4) + ", trained " + fmt(scale_t, 4);
  return r;
}

std::string format_check(const CheckResult& r) {
  std::ostringstream os;
  os << (r.pass ? "PASS" : "FAIL") << ' ' << r.id << ' ' << r.name << " (" << std::fixed << std::setprecision(2)
     << r.seconds << " s): " << r.detail;
  return os.str();
}

}  // namespace pdiar
