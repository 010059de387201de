#pragma once

// End-to-end runs on a corpus: build the four systems (plug-in baseline,
// untrained, PLDA-only trained, fully trained), diarize the dev and eval
// recordings, and tune the stopping threshold or likelihood scale on dev.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pdiar/clustering.hpp"
#include "pdiar/corpus.hpp"
#include "pdiar/evalkit.hpp"
#include "pdiar/model_io.hpp"
#include "pdiar/training.hpp"

namespace pdiar {

Timeline reference_timeline(const Recording& rec);
/// One turn per segment, speakers named "spk<label>".
Timeline hypothesis_timeline(const Recording& rec, const LabelString& labels);

/// Runs fn(0), ..., fn(count - 1) on up to `jobs` threads. The first exception
/// (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

/// Baseline PLDA: two-covariance estimate on the "plda" subset, jointly
/// diagonalized, with a precision net initialized to plug-in behavior.
DiarizationModel initial_model(const Corpus& corpus, std::uint64_t seed, ExtractorInit init = {});

/// A recording's merge sequence plus how thresholds apply to it.
struct CutPlan {
  MergeTrace trace;
  double offset = 0.0;  ///< calibrated threshold for the baseline, 0 for by-the-book
  bool strict = true;

  LabelString labels(double sigma) const { return cut(trace, offset + sigma, strict); }
};

CutPlan plan_recording(std::span<const ProbEmbeddingd> embeddings, const DiagPldad& plda, AhcMode mode,
                       double likelihood_scale);

/// Diarizes every recording with one configuration; results follow input order.
std::vector<LabelString> diarize_recordings(std::span<const Recording* const> recordings,
                                            const DiarizationModel& model, const AhcConfig& cfg, int jobs = 1);

/// Aggregate DER of labeled recordings.
double corpus_der(std::span<const Recording* const> recordings, std::span<const LabelString> labels,
                  const DerOptions& opts = {});

struct SweepPoint {
  double value = 0.0;
  double dev_der = 0.0;
  double eval_der = 0.0;
};

enum class SweepParam { Sigma, Scale };
std::string to_string(SweepParam p);
/// Accepts "sigma" and "scale".
SweepParam parse_sweep_param(const std::string& text);

struct SweepConfig {
  SweepParam param = SweepParam::Sigma;
  std::vector<double> grid;
  double fixed_sigma = 0.0;  ///< used while sweeping the scale
  double fixed_scale = 1.0;  ///< used while sweeping sigma
  DerOptions der;
  int jobs = 1;
};

/// Default grids: sigma 0 and +-10^(k/10) for k = -10..25, scale log-spaced on [0.01, 2] plus 1.
std::vector<double> default_grid(SweepParam p);

/// DER on dev and eval for each grid value. The trace of each recording is
/// computed once per scale and cut at every sigma.
std::vector<SweepPoint> sweep(const DiarizationModel& model, AhcMode mode, std::span<const Recording* const> dev,
                              std::span<const Recording* const> eval, const SweepConfig& cfg);

/// Dev-optimal point; ties go to the value nearest `neutral`.
SweepPoint best_on_dev(std::span<const SweepPoint> points, double neutral);

struct SystemResult {
  std::string name;
  AhcMode mode = AhcMode::ByTheBook;
  DiarizationModel model;
  SweepPoint at_default;   ///< sigma 0, scale 1
  SweepPoint sigma_tuned;
  SweepPoint scale_tuned;
  std::vector<SweepPoint> sigma_sweep;
  std::vector<SweepPoint> scale_sweep;
};

struct ExperimentConfig {
  SyntheticConfig corpus;
  ExtractorInit init;
  TrainConfig train;       ///< fully trained system
  TrainConfig plda_train;  ///< PLDA-only system; train_net is forced off

  ExperimentConfig();
  /// Seeds the corpus and both training runs.
  void set_seed(std::uint64_t seed);
  std::vector<double> sigma_grid = default_grid(SweepParam::Sigma);
  std::vector<double> scale_grid = default_grid(SweepParam::Scale);
  DerOptions der;
  int jobs = 1;
};

struct ExperimentResult {
  std::vector<SystemResult> systems;  ///< baseline, untrained, plda-trained, trained
  const SystemResult& system(const std::string& name) const;
};

/// Generates the corpus from cfg.corpus, trains both systems, and evaluates all four.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::function<void(const std::string&)>& progress = {});
/// Same on an existing corpus with train, heldout, dev, eval and plda subsets;
/// cfg.corpus is ignored.
ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg,
                                const std::function<void(const std::string&)>& progress = {});

/// Table with one row per system and dev/eval column pairs for sigma = 0,
/// tuned sigma and tuned scale.
void write_results_table(std::ostream& os, const ExperimentResult& result);

}  // namespace pdiar
