#pragma once

// Discriminative training of the extractor and the PLDA by multiclass
// cross-entropy over all partitions of n-segment trials drawn from single
// recordings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pdiar/corpus.hpp"
#include "pdiar/errors.hpp"
#include "pdiar/model_io.hpp"
#include "pdiar/partitions.hpp"
#include "pdiar/rng.hpp"

namespace pdiar {

struct OctetTrial {
  std::vector<SegmentRecord> records;
  LabelString truth;
};

/// Draws trials: a uniformly chosen recording, then n of its segments without
/// replacement in random order. Recordings with fewer than n segments are
/// skipped with a warning.
class OctetSampler {
 public:
  /// Throws DataError when no recording has n segments.
  OctetSampler(std::vector<const Recording*> recordings, int n, Rng rng);

  OctetTrial next();
  std::vector<OctetTrial> draw(std::size_t count);

  int n() const { return n_; }
  /// Segments in eligible recordings; one epoch is total_segments() / n trials.
  std::size_t total_segments() const { return total_segments_; }

 private:
  std::vector<const Recording*> recordings_;
  int n_;
  Rng rng_;
  std::size_t total_segments_ = 0;
  std::vector<std::size_t> scratch_;
};

/// Gradients for every trainable parameter; w is parameterized as exp(log_w).
struct GradientSet {
  Eigen::VectorXd log_w;
  ExtractorModel extractor;

  static GradientSet zeros_like(const DiarizationModel& model);
  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(double s);
  bool all_finite() const;
};

/// Mean over the batch of -log P(truth | trial).
double cross_entropy(std::span<const OctetTrial> batch, const DiarizationModel& model,
                     const PartitionTables& tables);

struct LossAndGradient {
  double loss = 0.0;
  GradientSet grad;
};

/// Exact analytic gradient of cross_entropy.
LossAndGradient loss_and_gradients(std::span<const OctetTrial> batch, const DiarizationModel& model,
                                   const PartitionTables& tables);

inline GradientSet gradients(std::span<const OctetTrial> batch, const DiarizationModel& model,
                             const PartitionTables& tables) {
  return loss_and_gradients(batch, model, tables).grad;
}

/// Per parameter group: ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
/// with central differences of the given step.
struct GradientCheck {
  std::vector<std::string> groups;
  std::vector<double> relative_error;

  double worst() const;
};

GradientCheck check_gradients(std::span<const OctetTrial> batch, const DiarizationModel& model,
                              const PartitionTables& tables, double step = 1e-5, double floor = 0.0);

struct TrainConfig {
  int n = 8;
  int batch_size = 100;
  double lr_net = 1.0;
  double lr_ratio = 1e-4;       ///< PLDA and mean transform learn at lr_net * lr_ratio
  double momentum = 0.0;
  int epochs = 20;
  bool train_net = true;        ///< false freezes the precision net (PLDA-only training)
  std::uint64_t seed = 1;
  std::optional<CrpParams> prior;  ///< default: fitted to the training speaker counts
  int monitor_trials = 500;     ///< fixed train and held-out trial sets for the history
  bool check = false;           ///< gradient check gate before training
  std::filesystem::path table_cache;  ///< optional directory for partition tables

  /// Throws DomainError on nonpositive sizes or rates, lr_ratio outside (0, 1].
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
};

struct Checkpoint {
  DiarizationModel model;
  GradientSet velocity;
  CrpParams prior;
  int epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loss went non-finite; carries the last checkpoint with a finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, Checkpoint last_good)
      : Error(ErrorKind::Numeric, what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct TrainResult {
  DiarizationModel model;
  CrpParams prior;
  std::vector<EpochStats> history;  ///< epoch 0 is the initial model
};

/// CRP whose expected cluster count over all training segments equals the
/// number of training speakers (counted per recording), with maximal variance.
CrpFit fit_training_prior(const std::vector<const Recording*>& train);

/// Plain SGD with two learning-rate groups, deterministic given cfg.seed.
/// `train` supplies the gradient trials, `heldout` the monitoring trials
/// (may be empty). `on_epoch` is called after every epoch.
TrainResult train(const TrainConfig& cfg, const DiarizationModel& init, const std::vector<const Recording*>& train,
                  const std::vector<const Recording*>& heldout,
                  const std::function<void(const EpochStats&, const Checkpoint&)>& on_epoch = {});

void write_history(const std::filesystem::path& path, const std::vector<EpochStats>& history);

}  // namespace pdiar
