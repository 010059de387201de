#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "pdiar/clustering.hpp"
#include "pdiar/corpus.hpp"
#include "pdiar/errors.hpp"
#include "pdiar/evalkit.hpp"
#include "pdiar/experiment.hpp"
#include "pdiar/log.hpp"
#include "pdiar/model_io.hpp"
#include "pdiar/selftest.hpp"
#include "pdiar/training.hpp"

#ifndef PDIAR_VERSION
#define PDIAR_VERSION "0.0.0"
#endif

namespace pdiar::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Flat "key = value" file; '#' starts a comment line.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Places config-file settings ahead of the command-line flags, so flags win.
std::vector<std::string> expand_config(const CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args[0]);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::optional<std::string> config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (!config) return args;
  std::vector<std::string> out{args[0]};
  for (const auto& [key, value] : read_config(*config)) {
    if (key == "config" || sub->get_option_no_throw("--" + key) == nullptr)
      throw UsageError("unknown config key '" + key + "' for " + args[0]);
    out.push_back("--" + key + "=" + value);
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

template <typename T>
void override(T& target, const std::optional<T>& value) {
  if (value) target = *value;
}

std::vector<const Recording*> select(const Corpus& corpus, const std::string& subset) {
  if (subset.empty()) {
    std::vector<const Recording*> all;
    for (const auto& r : corpus.recordings) all.push_back(&r);
    return all;
  }
  auto out = corpus.subset(subset);
  if (out.empty()) throw DataError("no recordings in subset '" + subset + "'");
  return out;
}

std::vector<Timeline> sorted(std::vector<Timeline> tl) {
  std::sort(tl.begin(), tl.end(), [](const Timeline& a, const Timeline& b) { return a.recording < b.recording; });
  return tl;
}

void write_rttm_to(const std::string& path, const std::vector<Timeline>& tl, std::ostream& out) {
  if (path == "-")
    write_rttm(out, tl);
  else
    write_rttm(fs::path(path), tl);
}

// ------------------------------------------------------------------ simulate

struct SimulateArgs {
  SyntheticConfig corpus;
  std::string out;
  std::string rttm;
};

void add_simulate(CLI::App& app, SimulateArgs& a) {
  auto* s = app.add_subcommand("simulate", "Write a synthetic corpus");
  auto& c = a.corpus;
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_option("--out", a.out, "Corpus file")->required();
  s->add_option("--rttm", a.rttm, "Also write the reference RTTM of every recording");
  s->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  s->add_option("--dim", c.dim, "Speaker-discriminative dimensions")->capture_default_str();
  s->add_option("--raw-dim", c.raw_dim, "Raw embedding dimensions")->capture_default_str();
  s->add_option("--quality-dim", c.quality_dim, "Quality feature dimensions")->capture_default_str();
  s->add_option("--n-speakers", c.n_speakers, "In-domain speaker pool")->capture_default_str();
  s->add_option("--n-recordings", c.n_recordings, "In-domain recordings")->capture_default_str();
  s->add_option("--segments-per-recording", c.segments_per_recording)->capture_default_str();
  s->add_option("--min-speakers", c.min_speakers_per_recording)->capture_default_str();
  s->add_option("--max-speakers", c.max_speakers_per_recording)->capture_default_str();
  s->add_option("--change-prob", c.change_prob, "Speaker change probability per segment")->capture_default_str();
  s->add_option("--within-precision-min", c.within_precision_min)->capture_default_str();
  s->add_option("--within-precision-max", c.within_precision_max)->capture_default_str();
  s->add_option("--log-noise-min", c.log_noise_min)->capture_default_str();
  s->add_option("--log-noise-max", c.log_noise_max)->capture_default_str();
  s->add_option("--duration-min", c.duration_min)->capture_default_str();
  s->add_option("--duration-max", c.duration_max)->capture_default_str();
  s->add_option("--quality-noise", c.quality_noise)->capture_default_str();
  s->add_flag("--reciprocal-quality", c.reciprocal_quality, "Encode quality as exp(-f)");
  s->add_flag("--noiseless", c.noiseless, "No segment noise");
  s->add_option("--plda-speakers", c.plda_speakers)->capture_default_str();
  s->add_option("--plda-segments-per-speaker", c.plda_segments_per_speaker)->capture_default_str();
}

int do_simulate(const SimulateArgs& a, std::ostream& out) {
  a.corpus.validate();
  const auto data = generate_corpus(a.corpus);
  write_corpus(a.out, data.corpus);
  if (!a.rttm.empty()) {
    std::vector<Timeline> ref;
    for (const auto& r : data.corpus.recordings) ref.push_back(reference_timeline(r));
    write_rttm_to(a.rttm, sorted(std::move(ref)), out);
  }
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string init;
  std::string init_out;
  std::string checkpoint_dir;
  std::string history;
  std::string table_cache;
  bool plda_only = false;
  bool check = false;
  std::uint64_t seed = 1;
  std::optional<int> epochs, batch_size, n, hidden_dim;
  std::optional<double> lr_net, lr_ratio, momentum, margin, weight_scale;
};

void add_train(CLI::App& app, TrainArgs& a) {
  const ExperimentConfig d;
  auto* s = app.add_subcommand("train", "Train the extractor and PLDA on a corpus");
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_option("--corpus", a.corpus, "Corpus with train, heldout and plda subsets")->required();
  s->add_option("--out", a.out, "Trained model file")->required();
  s->add_option("--init", a.init, "Start from this model instead of the two-covariance initialization");
  s->add_option("--init-out", a.init_out, "Write the initial model here");
  s->add_option("--checkpoint-dir", a.checkpoint_dir, "Write a checkpoint after every epoch");
  s->add_option("--history", a.history, "Write the per-epoch loss table here");
  s->add_option("--table-cache", a.table_cache, "Directory for cached partition tables");
  s->add_flag("--plda-only", a.plda_only, "Freeze the precision net");
  s->add_flag("--check", a.check, "Gradient check before training");
  s->add_option("--seed", a.seed, "Random seed")->capture_default_str();
  s->add_option("--epochs", a.epochs, "Epochs (default " + std::to_string(d.train.epochs) + ")");
  s->add_option("--batch-size", a.batch_size, "Trials per step (default 100)");
  s->add_option("--n", a.n, "Segments per trial (default 8)");
  s->add_option("--lr-net", a.lr_net, "Net learning rate (default 3, or 0.01 with --plda-only)");
  s->add_option("--lr-ratio", a.lr_ratio, "PLDA rate relative to lr-net (default 1e-4, or 1 with --plda-only)");
  s->add_option("--momentum", a.momentum, "Momentum (default 0)");
  s->add_option("--margin", a.margin, "Initial precision margin over w (default 5)");
  s->add_option("--weight-scale", a.weight_scale, "Std of the initial net weights (default 0.3)");
  s->add_option("--hidden-dim", a.hidden_dim, "Hidden units (default 2 D)");
}

int do_train(const TrainArgs& a, std::ostream& out) {
  const auto corpus = read_corpus(a.corpus);
  const ExperimentConfig defaults;
  auto init_opts = defaults.init;
  override(init_opts.margin, a.margin);
  override(init_opts.weight_scale, a.weight_scale);
  if (a.hidden_dim) init_opts.hidden_dim = *a.hidden_dim;
  TrainConfig cfg = a.plda_only ? defaults.plda_train : defaults.train;
  cfg.train_net = !a.plda_only;
  cfg.seed = a.seed;
  cfg.check = a.check;
  cfg.table_cache = a.table_cache;
  override(cfg.epochs, a.epochs);
  override(cfg.batch_size, a.batch_size);
  override(cfg.n, a.n);
  override(cfg.lr_net, a.lr_net);
  override(cfg.lr_ratio, a.lr_ratio);
  override(cfg.momentum, a.momentum);
  cfg.validate();

  const auto init = a.init.empty() ? initial_model(corpus, a.seed, init_opts) : load_model(a.init);
  if (!a.init_out.empty()) save_model(a.init_out, init);
  if (!a.checkpoint_dir.empty()) fs::create_directories(a.checkpoint_dir);
  out << "epoch train_ce heldout_ce\n";
  const auto result = train(cfg, init, corpus.subset("train"), corpus.subset("heldout"),
                            [&](const EpochStats& e, const Checkpoint& ckpt) {
                              out << e.epoch << ' ' << format_double(e.train_loss) << ' '
                                  << format_double(e.heldout_loss) << std::endl;
                              if (!a.checkpoint_dir.empty()) {
                                std::ostringstream name;
                                name << "epoch-" << std::setw(4) << std::setfill('0') << e.epoch << ".ckpt";
                                save_checkpoint(fs::path(a.checkpoint_dir) / name.str(), ckpt);
                              }
                            });
  save_model(a.out, result.model);
  if (!a.history.empty()) write_history(a.history, result.history);
  return kOk;
}

// ------------------------------------------------------------------ diarize

struct DiarizeArgs {
  std::string model;
  std::string corpus;
  std::string embeddings;
  std::string subset;
  std::string mode = "book";
  double sigma = 0.0;
  double scale = 1.0;
  std::string out = "-";
  std::string write_embeddings;
  int jobs = 1;
};

void add_diarize(CLI::App& app, DiarizeArgs& a) {
  auto* s = app.add_subcommand("diarize", "Cluster the segments of each recording and write RTTM");
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_option("--model", a.model, "Model file")->required();
  auto* c = s->add_option("--corpus", a.corpus, "Corpus file");
  auto* e = s->add_option("--embeddings", a.embeddings, "Embedding dump instead of a corpus");
  c->excludes(e);
  s->add_option("--subset", a.subset, "Only recordings of this subset (corpus input)");
  s->add_option("--mode", a.mode, "book or baseline")->check(CLI::IsMember({"book", "baseline"}))->capture_default_str();
  s->add_option("--sigma", a.sigma, "Stopping threshold")->capture_default_str();
  s->add_option("--scale", a.scale, "Likelihood scale")->capture_default_str();
  s->add_option("--out", a.out, "RTTM output, - for stdout")->capture_default_str();
  s->add_option("--write-embeddings", a.write_embeddings, "Dump the extracted embeddings (corpus input)");
  s->add_option("--jobs", a.jobs, "Parallel recordings")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--seed", "Accepted for uniformity; diarization is deterministic");
}

int do_diarize(const DiarizeArgs& a, std::ostream& out) {
  if (a.corpus.empty() == a.embeddings.empty()) throw UsageError("diarize needs exactly one of --corpus, --embeddings");
  const auto model = load_model(a.model);
  AhcConfig cfg{parse_ahc_mode(a.mode), a.sigma, a.scale};
  cfg.validate();

  std::vector<Timeline> hyp;
  if (!a.corpus.empty()) {
    const auto corpus = read_corpus(a.corpus);
    const auto recs = select(corpus, a.subset);
    const auto labels = diarize_recordings(recs, model, cfg, a.jobs);
    for (std::size_t i = 0; i < recs.size(); ++i) hyp.push_back(hypothesis_timeline(*recs[i], labels[i]));
    if (!a.write_embeddings.empty()) {
      std::vector<EmbeddedSegment> dump;
      for (const auto* r : recs)
        for (const auto& s : r->segments)
          dump.push_back({r->id, s.id, s.start, s.record.duration, extract(s.record, model.extractor)});
      write_embeddings(a.write_embeddings, dump);
    }
  } else {
    std::map<std::string, std::vector<EmbeddedSegment>> by_rec;
    for (auto& s : read_embeddings(a.embeddings)) by_rec[s.recording].push_back(std::move(s));
    std::vector<const std::vector<EmbeddedSegment>*> groups;
    for (const auto& [id, segs] : by_rec) groups.push_back(&segs);
    hyp.resize(groups.size());
    parallel_for(groups.size(), a.jobs, [&](std::size_t i) {
      const auto& segs = *groups[i];
      std::vector<ProbEmbeddingd> emb;
      for (const auto& s : segs) emb.push_back(s.embedding);
      const auto labels = diarize_embeddings(emb, model.plda, cfg);
      Timeline tl{segs.front().recording, {}};
      for (std::size_t t = 0; t < segs.size(); ++t)
        tl.turns.push_back({segs[t].start, segs[t].duration, "spk" + std::to_string(labels[t])});
      hyp[i] = std::move(tl);
    });
  }
  write_rttm_to(a.out, sorted(std::move(hyp)), out);
  return kOk;
}

// -------------------------------------------------------------------- score

struct ScoreArgs {
  std::string ref;
  std::string hyp;
  DerOptions der;
  std::string tsv;
};

void add_score(CLI::App& app, ScoreArgs& a) {
  auto* s = app.add_subcommand("score", "Diarization error rate of hypothesis RTTM against reference RTTM");
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_option("--ref", a.ref, "Reference RTTM")->required();
  s->add_option("--hyp", a.hyp, "Hypothesis RTTM")->required();
  s->add_option("--collar", a.der.collar, "Seconds excised around reference boundaries")->capture_default_str();
  s->add_flag("--exact", a.der.exact, "Exact interval arithmetic instead of 10 ms frames");
  s->add_option("--frame", a.der.frame, "Frame length in seconds")->capture_default_str();
  s->add_option("--tsv", a.tsv, "Also write a tab-separated report");
  s->add_option("--jobs", "Accepted for uniformity");
  s->add_option("--seed", "Accepted for uniformity");
}

int do_score(const ScoreArgs& a, std::ostream& out) {
  a.der.validate();
  const auto ref = read_rttm(fs::path(a.ref));
  const auto hyp = read_rttm(fs::path(a.hyp));
  const auto report = score(ref, hyp, a.der);
  write_report_table(out, report);
  if (!a.tsv.empty()) {
    std::ofstream os(a.tsv);
    if (!os) throw DataError("cannot write " + a.tsv);
    write_report_tsv(os, report);
  }
  return kOk;
}

// -------------------------------------------------------------------- sweep

struct SweepArgs {
  std::string corpus;
  std::string model;
  std::string mode = "book";
  std::string param = "sigma";
  std::vector<double> grid;
  double sigma = 0.0;
  double scale = 1.0;
  std::string dev = "dev";
  std::string eval = "eval";
  DerOptions der;
  int jobs = 1;
  std::uint64_t seed = 1;
  std::optional<int> epochs;
};

void add_sweep(CLI::App& app, SweepArgs& a) {
  auto* s = app.add_subcommand("sweep", "Tune sigma or the likelihood scale on dev and report dev/eval DER");
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_option("--corpus", a.corpus, "Corpus file")->required();
  s->add_option("--model", a.model,
                "Model to sweep; without it the four systems are trained and tuned (baseline, untrained, "
                "plda-trained, trained)");
  s->add_option("--mode", a.mode, "book or baseline")->check(CLI::IsMember({"book", "baseline"}))->capture_default_str();
  s->add_option("--param", a.param, "sigma or scale")->check(CLI::IsMember({"sigma", "scale"}))->capture_default_str();
  s->add_option("--grid", a.grid, "Comma-separated grid (default log-spaced)")->delimiter(',');
  s->add_option("--sigma", a.sigma, "Fixed sigma while sweeping the scale")->capture_default_str();
  s->add_option("--scale", a.scale, "Fixed scale while sweeping sigma")->capture_default_str();
  s->add_option("--dev-subset", a.dev, "Tuning subset")->capture_default_str();
  s->add_option("--eval-subset", a.eval, "Test subset")->capture_default_str();
  s->add_option("--collar", a.der.collar)->capture_default_str();
  s->add_option("--jobs", a.jobs, "Parallel recordings")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--seed", a.seed, "Training seed when no model is given")->capture_default_str();
  s->add_option("--epochs", a.epochs, "Training epochs when no model is given");
}

int do_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const auto corpus = read_corpus(a.corpus);
  const auto param = parse_sweep_param(a.param);
  if (a.model.empty()) {
    ExperimentConfig cfg;
    cfg.set_seed(a.seed);
    if (a.epochs) cfg.train.epochs = cfg.plda_train.epochs = *a.epochs;
    cfg.der = a.der;
    cfg.jobs = a.jobs;
    if (!a.grid.empty()) (param == SweepParam::Sigma ? cfg.sigma_grid : cfg.scale_grid) = a.grid;
    const auto res = run_experiment(corpus, cfg, [&](const std::string& m) { err << m << std::endl; });
    write_results_table(out, res);
    return kOk;
  }
  const auto model = load_model(a.model);
  SweepConfig sc;
  sc.param = param;
  sc.grid = a.grid.empty() ? default_grid(param) : a.grid;
  sc.fixed_sigma = a.sigma;
  sc.fixed_scale = a.scale;
  sc.der = a.der;
  sc.jobs = a.jobs;
  const auto points = sweep(model, parse_ahc_mode(a.mode), select(corpus, a.dev), select(corpus, a.eval), sc);
  const auto flags = out.flags();
  out << std::setw(12) << a.param << std::setw(9) << "dev" << std::setw(9) << "eval" << '\n' << std::fixed;
  for (const auto& p : points)
    out << std::setw(12) << std::setprecision(4) << p.value << std::setprecision(2) << std::setw(9)
        << 100 * p.dev_der << std::setw(9) << 100 * p.eval_der << '\n';
  const auto best = best_on_dev(points, param == SweepParam::Sigma ? 0.0 : 1.0);
  out << "best on dev: " << a.param << " = " << std::setprecision(4) << best.value << std::setprecision(2)
      << ", dev " << 100 * best.dev_der << ", eval " << 100 * best.eval_der << '\n';
  out.flags(flags);
  return kOk;
}

// ----------------------------------------------------------------- selftest

struct SelftestArgs {
  bool full = false;
  int jobs = 1;
};

void add_selftest(CLI::App& app, SelftestArgs& a) {
  auto* s = app.add_subcommand("selftest", "Run the built-in correctness checks");
  s->add_option("--config", "Flat key = value file; flags override it");
  s->add_flag("--full", a.full, "Also run the three-seed end-to-end experiment (minutes)");
  s->add_option("--jobs", a.jobs, "Parallel recordings in the experiment")->capture_default_str();
  s->add_option("--seed", "Accepted for uniformity; checks use fixed seeds");
}

int do_selftest(const SelftestArgs& a, std::ostream& out, std::ostream& err) {
  auto checks = run_fast_checks();
  if (a.full) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto runs = run_seeded_experiments({1, 2, 3}, a.jobs, [&](const std::string& m) { err << m << std::endl; });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    checks.push_back(check_system_ordering(runs, seconds));
    checks.push_back(check_calibration_drift(runs));
    std::sort(checks.begin(), checks.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
  }
  bool ok = true;
  for (const auto& c : checks) {
    out << format_check(c) << '\n';
    ok = ok && c.pass;
  }
  return ok ? kOk : kNumeric;
}

int report(std::ostream& err, const char* kind, const std::string& what, int code) {
  err << "pdiar-error: " << kind << ": " << what << std::endl;
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diarization with uncertainty-aware PLDA clustering", "pdiar"};
  app.set_version_flag("--version", std::string("pdiar ") + PDIAR_VERSION + " (model format " +
                                        std::to_string(kModelFormatVersion) + ")");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  SimulateArgs sim;
  TrainArgs tr;
  DiarizeArgs dz;
  ScoreArgs sc;
  SweepArgs sw;
  SelftestArgs st;
  add_simulate(app, sim);
  add_train(app, tr);
  add_diarize(app, dz);
  add_score(app, sc);
  add_sweep(app, sw);
  add_selftest(app, st);

  auto previous = set_warning_handler([&](std::string_view m) { err << "pdiar-warning: " << m << std::endl; });
  struct Restore {
    WarningHandler h;
    ~Restore() { set_warning_handler(std::move(h)); }
  } restore{std::move(previous)};

  try {
    auto expanded = expand_config(app, args);
    std::reverse(expanded.begin(), expanded.end());  // CLI11 consumes from the back
    app.parse(expanded);
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "simulate") return do_simulate(sim, out);
    if (name == "train") return do_train(tr, out);
    if (name == "diarize") return do_diarize(dz, out);
    if (name == "score") return do_score(sc, out);
    if (name == "sweep") return do_sweep(sw, out, err);
    return do_selftest(st, out, err);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report(err, "usage", e.what(), kUsage);
  } catch (const UsageError& e) {
    return report(err, "usage", e.what(), kUsage);
  } catch (const Error& e) {
    return e.kind() == ErrorKind::Numeric ? report(err, "numeric", e.what(), kNumeric)
                                          : report(err, "data", e.what(), kData);
  } catch (const fs::filesystem_error& e) {
    return report(err, "data", e.what(), kData);
  } catch (const std::exception& e) {
    return report(err, "numeric", e.what(), kNumeric);
  }
}

}  // namespace pdiar::cli
