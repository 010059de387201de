#pragma once

// Speaker timelines, RTTM I/O and diarization error rate.
//
// DER is computed over elementary intervals: every turn boundary (and collar
// edge) splits the timeline, and within each piece the reference and
// hypothesis speaker sets are constant. Hypothesis speakers are mapped
// one-to-one onto reference speakers to maximize total overlap.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pdiar {

struct Turn {
  double start = 0.0;
  double duration = 0.0;
  std::string speaker;

  double end() const { return start + duration; }
};

struct Timeline {
  std::string recording;
  std::vector<Turn> turns;

  /// Throws DataError on an empty recording id, non-finite times,
  /// duration <= 0 or an empty speaker label.
  void validate() const;
};

/// Timelines sorted by recording id; turns keep file order.
/// Throws ParseError (with line number) on malformed SPEAKER lines.
/// Other line types are skipped with a warning.
std::vector<Timeline> read_rttm(std::istream& is, const std::string& source = "<rttm>");
std::vector<Timeline> read_rttm(const std::filesystem::path& path);

/// Times are written with 3 decimals.
void write_rttm(std::ostream& os, std::span<const Timeline> timelines);
void write_rttm(const std::filesystem::path& path, std::span<const Timeline> timelines);

struct DerOptions {
  double collar = 0.0;   ///< seconds excised on each side of every reference boundary
  bool exact = false;    ///< score exact interval arithmetic instead of snapping to frames
  double frame = 0.01;   ///< frame length in seconds for snapped scoring

  void validate() const;
};

/// Error times in seconds.
struct DerCounts {
  double scored = 0.0;       ///< reference speaker time in the scored region
  double missed = 0.0;
  double false_alarm = 0.0;
  double confusion = 0.0;

  double errors() const { return missed + false_alarm + confusion; }
  /// Fractions of `scored`.
  double der() const { return errors() / scored; }
  double missed_rate() const { return missed / scored; }
  double false_alarm_rate() const { return false_alarm / scored; }
  double confusion_rate() const { return confusion / scored; }

  DerCounts& operator+=(const DerCounts& o);
};

/// Throws ScoringError if the recording ids differ or the reference has no
/// scored speech.
DerCounts der(const Timeline& ref, const Timeline& hyp, const DerOptions& opts = {});

struct DerReport {
  std::vector<std::pair<std::string, DerCounts>> recordings;  ///< sorted by id
  DerCounts total;
};

/// Scores every reference recording. A missing hypothesis counts as all
/// missed speech; hypotheses without a reference are ignored. Both cases warn.
DerReport score(std::span<const Timeline> ref, std::span<const Timeline> hyp, const DerOptions& opts = {});

/// Aligned text table with percentages.
void write_report_table(std::ostream& os, const DerReport& report);
/// Tab-separated: recording, scored seconds, then miss/fa/confusion/der fractions.
void write_report_tsv(std::ostream& os, const DerReport& report);

/// Maximum-weight one-to-one assignment of rows to columns of a nonnegative
/// weight matrix (any shape). Returns, per row, the assigned column or -1.
std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weight);

}  // namespace pdiar
