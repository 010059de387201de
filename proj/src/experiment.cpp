#include "pdiar/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include "pdiar/errors.hpp"

namespace pdiar {

Timeline reference_timeline(const Recording& rec) {
  Timeline tl{rec.id, {}};
  for (const auto& s : rec.segments) tl.turns.push_back({s.start, s.record.duration, s.speaker});
  return tl;
}

Timeline hypothesis_timeline(const Recording& rec, const LabelString& labels) {
  if (labels.size() != rec.segments.size())
    throw SizeError("recording " + rec.id + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(rec.segments.size()) + " segments");
  Timeline tl{rec.id, {}};
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const auto& s = rec.segments[t];
    tl.turns.push_back({s.start, s.record.duration, "spk" + std::to_string(labels[t])});
  }
  return tl;
}

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(jobs, 1)));
  std::vector<std::exception_ptr> errors(count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= count) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

DiarizationModel initial_model(const Corpus& corpus, std::uint64_t seed, ExtractorInit init) {
  std::vector<Eigen::VectorXd> raw;
  std::vector<int> spk;
  std::map<std::string, int> ids;
  for (const auto* rec : corpus.subset("plda")) {
    for (const auto& s : rec->segments) {
      raw.push_back(s.record.raw);
      spk.push_back(ids.emplace(s.speaker, static_cast<int>(ids.size())).first->second);
    }
  }
  if (raw.empty()) throw DataError("corpus has no plda recordings to estimate the baseline PLDA");
  if (init.quality_dim == 0) init.quality_dim = corpus.quality_dim;
  auto ie = init_extractor(estimate_two_covariance(raw, spk), seed, init);
  DiarizationModel m{std::move(ie.model), std::move(ie.plda)};
  m.validate();
  return m;
}

CutPlan plan_recording(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, AhcMode mode,
                       double likelihood_scale) {
  if (mode == AhcMode::ByTheBook) return {by_the_book_trace(embeddings, plda, likelihood_scale), 0.0, true};
  if (embeddings.empty()) throw DataError("cannot cluster a recording without segments");
  const auto sim = plug_in_scores(embeddings, plda, likelihood_scale);
  return {average_linkage_trace(sim), baseline_threshold(sim), false};
}

std::vector<LabelString> diarize_recordings(std::span<const Recording* const> recordings,
                                            const DiarizationModel& model, const AhcConfig& cfg, int jobs) {
  cfg.validate();
  model.validate();
  std::vector<LabelString> out(recordings.size());
  parallel_for(recordings.size(), jobs, [&](std::size_t i) {
    const auto emb = extract(recordings[i]->records(), model.extractor);
    out[i] = diarize_embeddings(emb, model.plda, cfg);
  });
  return out;
}

double corpus_der(std::span<const Recording* const> recordings, std::span<const LabelString> labels,
                  const DerOptions& opts) {
  if (recordings.size() != labels.size()) throw SizeError("corpus_der: one labeling per recording required");
  DerCounts total;
  for (std::size_t i = 0; i < recordings.size(); ++i)
    total += der(reference_timeline(*recordings[i]), hypothesis_timeline(*recordings[i], labels[i]), opts);
  return total.der();
}

std::string to_string(SweepParam p) { return p == SweepParam::Sigma ? "sigma" : "scale"; }

SweepParam parse_sweep_param(const std::string& text) {
  if (text == "sigma") return SweepParam::Sigma;
  if (text == "scale") return SweepParam::Scale;
  throw DomainError("unknown sweep parameter '" + text + "' (expected sigma or scale)");
}

std::vector<double> default_grid(SweepParam p) {
  std::vector<double> g;
  if (p == SweepParam::Sigma) {
    g.push_back(0.0);
    for (int k = -10; k <= 25; ++k) {
      g.push_back(std::pow(10.0, k / 10.0));
      g.push_back(-std::pow(10.0, k / 10.0));
    }
    std::sort(g.begin(), g.end());
  } else {
    for (int k = 0; k <= 40; ++k) g.push_back(0.01 * std::pow(200.0, k / 40.0));
    g.push_back(1.0);
    std::sort(g.begin(), g.end());
  }
  return g;
}

namespace {

struct Prepared {
  const Recording* rec;
  std::vector<ProbEmbeddingd> emb;
  Timeline ref;
};

std::vector<Prepared> prepare(std::span<const Recording* const> recs, const DiarizationModel& model, int jobs) {
  std::vector<Prepared> out(recs.size());
  parallel_for(recs.size(), jobs, [&](std::size_t i) {
    out[i] = {recs[i], extract(recs[i]->records(), model.extractor), reference_timeline(*recs[i])};
  });
  return out;
}

// DER at each sigma for one likelihood scale.
std::vector<double> der_over_sigmas(const std::vector<Prepared>& recs, const DiagPldad& plda, AhcMode mode, double scale,
                                    std::span<const double> sigmas, const DerOptions& opts, int jobs) {
  std::vector<std::vector<DerCounts>> per(recs.size());
  parallel_for(recs.size(), jobs, [&](std::size_t i) {
    const auto plan = plan_recording(recs[i].emb, plda, mode, scale);
    for (double s : sigmas) per[i].push_back(der(recs[i].ref, hypothesis_timeline(*recs[i].rec, plan.labels(s)), opts));
  });
  std::vector<double> out;
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    DerCounts total;
    for (const auto& p : per) total += p[k];
    out.push_back(total.der());
  }
  return out;
}

}  // namespace

std::vector<SweepPoint> sweep(const DiarizationModel& model, AhcMode mode, std::span<const Recording* const> dev,
                              std::span<const Recording* const> eval, const SweepConfig& cfg) {
  model.validate();
  cfg.der.validate();
  if (cfg.grid.empty()) throw DomainError("sweep grid is empty");
  for (double v : cfg.grid) {
    if (std::isnan(v)) throw DomainError("sweep grid contains NaN");
    if (cfg.param == SweepParam::Scale && !(v > 0.0 && std::isfinite(v)))
      throw DomainError("likelihood scales must be finite and > 0");
  }
  if (dev.empty() || eval.empty()) throw DataError("sweep needs dev and eval recordings");
  const auto pd = prepare(dev, model, cfg.jobs);
  const auto pe = prepare(eval, model, cfg.jobs);
  std::vector<SweepPoint> out;
  if (cfg.param == SweepParam::Sigma) {
    const auto d = der_over_sigmas(pd, model.plda, mode, cfg.fixed_scale, cfg.grid, cfg.der, cfg.jobs);
    const auto e = der_over_sigmas(pe, model.plda, mode, cfg.fixed_scale, cfg.grid, cfg.der, cfg.jobs);
    for (std::size_t k = 0; k < cfg.grid.size(); ++k) out.push_back({cfg.grid[k], d[k], e[k]});
  } else {
    const double sigma[] = {cfg.fixed_sigma};
    for (double s : cfg.grid) {
      out.push_back({s, der_over_sigmas(pd, model.plda, mode, s, sigma, cfg.der, cfg.jobs)[0],
                     der_over_sigmas(pe, model.plda, mode, s, sigma, cfg.der, cfg.jobs)[0]});
    }
  }
  return out;
}

SweepPoint best_on_dev(std::span<const SweepPoint> points, double neutral) {
  if (points.empty()) throw DomainError("no sweep points");
  const SweepPoint* best = &points[0];
  for (const auto& p : points) {
    if (p.dev_der < best->dev_der ||
        (p.dev_der == best->dev_der && std::abs(p.value - neutral) < std::abs(best->value - neutral)))
      best = &p;
  }
  return *best;
}

ExperimentConfig::ExperimentConfig() {
  // Plain SGD barely moves the net when the initial precisions sit far above
  // w, so start closer to the saturation point with larger random weights.
  init.margin = 5.0;
  init.weight_scale = 0.3;
  train.lr_net = 3.0;
  train.epochs = 200;
  plda_train = train;
  plda_train.train_net = false;
  plda_train.lr_ratio = 1.0;
  plda_train.lr_net = 1e-2;
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
  corpus.seed = seed;
  train.seed = seed;
  plda_train.seed = seed;
}

const SystemResult& ExperimentResult::system(const std::string& name) const {
  for (const auto& s : systems)
    if (s.name == name) return s;
  throw DomainError("no system named " + name);
}

namespace {

SystemResult evaluate_system(std::string name, AhcMode mode, DiarizationModel model,
                             std::span<const Recording* const> dev, std::span<const Recording* const> eval,
                             const ExperimentConfig& cfg) {
  SystemResult r{std::move(name), mode, std::move(model), {}, {}, {}, {}, {}};
  SweepConfig sc;
  sc.der = cfg.der;
  sc.jobs = cfg.jobs;
  sc.param = SweepParam::Sigma;
  sc.grid = cfg.sigma_grid;
  if (std::find(sc.grid.begin(), sc.grid.end(), 0.0) == sc.grid.end()) sc.grid.push_back(0.0);
  std::sort(sc.grid.begin(), sc.grid.end());
  r.sigma_sweep = sweep(r.model, mode, dev, eval, sc);
  r.sigma_tuned = best_on_dev(r.sigma_sweep, 0.0);
  for (const auto& p : r.sigma_sweep)
    if (p.value == 0.0) r.at_default = p;
  sc.param = SweepParam::Scale;
  sc.grid = cfg.scale_grid;
  r.scale_sweep = sweep(r.model, mode, dev, eval, sc);
  r.scale_tuned = best_on_dev(r.scale_sweep, 1.0);
  return r;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& progress) {
  return run_experiment(generate_corpus(cfg.corpus).corpus, cfg, progress);
}

ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg,
                                const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const auto train_set = corpus.subset("train");
  const auto heldout = corpus.subset("heldout");
  const auto dev = corpus.subset("dev");
  const auto eval = corpus.subset("eval");
  const auto init = initial_model(corpus, cfg.train.seed, cfg.init);

  say("training PLDA-only system");
  auto plda_cfg = cfg.plda_train;
  plda_cfg.train_net = false;
  const auto plda_only = train(plda_cfg, init, train_set, heldout);
  say("training full system");
  const auto full = train(cfg.train, init, train_set, heldout);

  ExperimentResult res;
  say("evaluating baseline");
  res.systems.push_back(evaluate_system("baseline", AhcMode::Baseline, init, dev, eval, cfg));
  say("evaluating untrained");
  res.systems.push_back(evaluate_system("untrained", AhcMode::ByTheBook, init, dev, eval, cfg));
  say("evaluating plda-trained");
  res.systems.push_back(evaluate_system("plda-trained", AhcMode::ByTheBook, plda_only.model, dev, eval, cfg));
  say("evaluating trained");
  res.systems.push_back(evaluate_system("trained", AhcMode::ByTheBook, full.model, dev, eval, cfg));
  return res;
}

void write_results_table(std::ostream& os, const ExperimentResult& result) {
  const auto flags = os.flags();
  os << std::left << std::setw(14) << "system" << std::right << std::setw(8) << "dev" << std::setw(8) << "eval"
     << std::setw(10) << "sigma*" << std::setw(8) << "dev" << std::setw(8) << "eval" << std::setw(10) << "scale*"
     << std::setw(8) << "dev" << std::setw(8) << "eval" << '\n';
  os << std::fixed;
  for (const auto& s : result.systems) {
    os << std::left << std::setw(14) << s.name << std::right << std::setprecision(2) << std::setw(8)
       << 100 * s.at_default.dev_der << std::setw(8) << 100 * s.at_default.eval_der << std::setw(10)
       << s.sigma_tuned.value << std::setw(8) << 100 * s.sigma_tuned.dev_der << std::setw(8)
       << 100 * s.sigma_tuned.eval_der << std::setprecision(3) << std::setw(10) << s.scale_tuned.value
       << std::setprecision(2) << std::setw(8) << 100 * s.scale_tuned.dev_der << std::setw(8)
       << 100 * s.scale_tuned.eval_der << '\n';
  }
  os.flags(flags);
}

}  // namespace pdiar
