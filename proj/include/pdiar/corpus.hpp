#pragma once

// Recordings of labeled segments, the synthetic generator that stands in for
// the speech front-end, and the plain-text corpus format.
//
// Corpus file, one segment per line, whitespace separated:
//   recording-id segment-id start duration raw[R] quality[Q] speaker
// preceded by a header line "#pdiar-corpus 1 raw_dim=R quality_dim=Q".
// Other lines starting with '#' are comments. The subset of a recording
// (train, heldout, dev, eval, plda) is the part of its id before the first '-'.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pdiar/extractor.hpp"
#include "pdiar/partitions.hpp"
#include "pdiar/rng.hpp"

namespace pdiar {

struct Segment {
  std::string id;
  double start = 0.0;
  SegmentRecord record;
  std::string speaker;
  Eigen::VectorXd oracle_prec;  ///< generator-side precisions in the latent basis; may be empty
};

struct Recording {
  std::string id;
  std::vector<Segment> segments;

  std::string subset() const;
  LabelString truth() const;
  std::vector<SegmentRecord> records() const;
};

struct Corpus {
  Eigen::Index raw_dim = 0;
  Eigen::Index quality_dim = 0;
  std::vector<Recording> recordings;

  /// Recordings whose subset is `name`, in corpus order.
  std::vector<const Recording*> subset(const std::string& name) const;
};

struct SyntheticConfig {
  int dim = 8;                  ///< speaker-discriminative dimensions D
  int raw_dim = 8;              ///< raw embedding dimensions R >= D; extras carry weak speaker variance
  int quality_dim = 4;          ///< Q: Q-1 noisy encodings of log noise variance, plus duration
  int n_speakers = 200;         ///< in-domain speaker pool, split 60/20/20 across train+heldout/dev/eval
  int n_recordings = 200;       ///< in-domain recordings, split like the speakers
  int segments_per_recording = 40;
  int min_speakers_per_recording = 2;
  int max_speakers_per_recording = 4;
  double change_prob = 0.25;     ///< probability the next segment switches speaker
  double within_precision_min = 2.0;  ///< true w_j drawn log-uniform on [min, max]
  double within_precision_max = 8.0;
  double weak_speaker_variance = 0.01;  ///< between variance of the R - D extra dims
  double log_noise_min = -4.0;  ///< log sigma^2 uniform on [min, max] per segment
  double log_noise_max = 2.0;
  bool noiseless = false;       ///< sigma^2 = 0: oracle precisions are infinite
  double duration_min = 0.5;
  double duration_max = 3.0;
  double quality_noise = 0.1;   ///< std of the noise on each quality encoding
  bool reciprocal_quality = false;  ///< encode exp(-f) instead of f, like inverted second-order stats
  // Out-of-domain, high quality data for the baseline PLDA.
  int plda_speakers = 300;
  int plda_segments_per_speaker = 10;
  double plda_noise_scale = 0.02;  ///< multiplies sigma^2 for these segments
  double plda_duration = 3.0;
  std::uint64_t seed = 1;

  /// Throws DomainError on nonpositive counts or inverted ranges.
  void validate() const;
};

struct SyntheticTruth {
  Eigen::MatrixXd mixing;              ///< raw = mixing * latent
  Eigen::VectorXd within_precision;    ///< w_true per latent dim
  Eigen::VectorXd between_variance;    ///< 1 for the first D dims, weak beyond
  Eigen::VectorXd noise_profile;       ///< per-dim multiplier of sigma^2
};

struct SyntheticCorpus {
  Corpus corpus;
  SyntheticTruth truth;
};

/// y ~ N(0, diag(truth.between_variance)).
Eigen::VectorXd sample_speaker(const SyntheticTruth& truth, Rng& rng);

/// Deterministic given cfg.seed.
///
/// Speaker y ~ N(0, diag(between_variance)); clean x ~ N(y, diag(1 / w_true));
/// latent = x + noise with variance sigma^2_j = exp(u) c_j / duration, where
/// u ~ U[log_noise_min, log_noise_max]; raw = mixing * latent.
SyntheticCorpus generate_corpus(const SyntheticConfig& cfg);

void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
/// Throws ParseError (with line number) on malformed lines or wrong dimensions.
Corpus read_corpus(const std::filesystem::path& path);

/// Embedding dump: header "#pdiar-embeddings 1 dim=D", then per segment
///   recording-id segment-id start duration xhat[D] prec[D]
struct EmbeddedSegment {
  std::string recording;
  std::string segment;
  double start = 0.0;
  double duration = 0.0;
  ProbEmbeddingd embedding;
};

void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddedSegment>& segments);
std::vector<EmbeddedSegment> read_embeddings(const std::filesystem::path& path);

/// 17 significant digits, which round-trips every double.
std::string format_double(double v);
/// Parses a double; throws ParseError mentioning `context` on failure.
double parse_double(std::string_view text, const std::string& context);

}  // namespace pdiar
