#include "pdiar/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "pdiar/corpus.hpp"
#include "pdiar/errors.hpp"
#include "pdiar/log.hpp"

namespace pdiar {

void Timeline::validate() const {
  if (recording.empty()) throw DataError("timeline has an empty recording id");
  for (const auto& t : turns) {
    if (!std::isfinite(t.start) || !std::isfinite(t.duration) || !(t.duration > 0.0))
      throw DataError("timeline " + recording + ": turn needs finite start and duration > 0");
    if (t.speaker.empty()) throw DataError("timeline " + recording + ": empty speaker label");
  }
}

// ---------------------------------------------------------------- RTTM

std::vector<Timeline> read_rttm(std::istream& is, const std::string& source) {
  std::map<std::string, Timeline> by_id;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    const std::string ctx = source + ":" + std::to_string(lineno);
    if (f[0] != "SPEAKER") {
      warn(ctx + ": skipping " + f[0] + " line");
      continue;
    }
    if (f.size() < 8) throw ParseError(ctx + ": SPEAKER line needs at least 8 fields");
    Turn t{parse_double(f[3], ctx), parse_double(f[4], ctx), f[7]};
    if (!std::isfinite(t.start) || !std::isfinite(t.duration) || !(t.duration > 0.0))
      throw ParseError(ctx + ": onset must be finite and duration > 0");
    auto& tl = by_id[f[1]];
    tl.recording = f[1];
    tl.turns.push_back(std::move(t));
  }
  std::vector<Timeline> out;
  for (auto& [id, tl] : by_id) out.push_back(std::move(tl));
  return out;
}

std::vector<Timeline> read_rttm(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open RTTM " + path.string());
  return read_rttm(is, path.string());
}

void write_rttm(std::ostream& os, std::span<const Timeline> timelines) {
  char buf[64];
  for (const auto& tl : timelines) {
    tl.validate();
    for (const auto& t : tl.turns) {
      os << "SPEAKER " << tl.recording << " 1 ";
      std::snprintf(buf, sizeof buf, "%.3f %.3f", t.start, t.duration);
      os << buf << " <NA> <NA> " << t.speaker << " <NA> <NA>\n";
    }
  }
}

void write_rttm(const std::filesystem::path& path, std::span<const Timeline> timelines) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write RTTM " + path.string());
  write_rttm(os, timelines);
}

// ---------------------------------------------------------------- assignment

// Shortest augmenting path with potentials; minimizes cost for rows <= cols.
namespace {

std::vector<int> min_cost_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weight) {
  if (weight.size() == 0) return std::vector<int>(static_cast<std::size_t>(weight.rows()), -1);
  if (!weight.allFinite()) throw DomainError("assignment weights must be finite");
  if (weight.rows() <= weight.cols()) return min_cost_assignment(-weight);
  const auto col_to_row = min_cost_assignment(-weight.transpose());
  std::vector<int> out(static_cast<std::size_t>(weight.rows()), -1);
  for (std::size_t c = 0; c < col_to_row.size(); ++c) out[static_cast<std::size_t>(col_to_row[c])] = static_cast<int>(c);
  return out;
}

// ---------------------------------------------------------------- DER

void DerOptions::validate() const {
  if (!std::isfinite(collar) || collar < 0.0) throw DomainError("collar must be finite and >= 0");
  if (!exact && !(std::isfinite(frame) && frame > 0.0)) throw DomainError("frame length must be > 0");
}

DerCounts& DerCounts::operator+=(const DerCounts& o) {
  scored += o.scored;
  missed += o.missed;
  false_alarm += o.false_alarm;
  confusion += o.confusion;
  return *this;
}

namespace {

struct Span {
  double begin, end;
  int speaker;
};

// Turns as spans with speaker indices; snapped spans of zero length are dropped.
std::vector<Span> to_spans(const Timeline& tl, const DerOptions& opts, std::vector<std::string>& names) {
  std::map<std::string, int> index;
  for (std::size_t k = 0; k < names.size(); ++k) index[names[k]] = static_cast<int>(k);
  auto snap = [&](double t) { return opts.exact ? t : std::round(t / opts.frame) * opts.frame; };
  std::vector<Span> out;
  for (const auto& t : tl.turns) {
    auto [it, fresh] = index.emplace(t.speaker, static_cast<int>(names.size()));
    if (fresh) names.push_back(t.speaker);
    const double b = snap(t.start), e = snap(t.end());
    if (e > b) out.push_back({b, e, it->second});
  }
  return out;
}

}  // namespace

DerCounts der(const Timeline& ref, const Timeline& hyp, const DerOptions& opts) {
  opts.validate();
  ref.validate();
  hyp.validate();
  if (ref.recording != hyp.recording)
    throw ScoringError("cannot score " + hyp.recording + " against reference " + ref.recording);
  std::vector<std::string> ref_names, hyp_names;
  const auto rs = to_spans(ref, opts, ref_names);
  const auto hs = to_spans(hyp, opts, hyp_names);

  std::vector<std::pair<double, double>> collars;
  std::vector<double> cuts;
  for (const auto& s : rs) {
    for (double b : {s.begin, s.end}) {
      cuts.push_back(b);
      if (opts.collar > 0.0) {
        collars.emplace_back(b - opts.collar, b + opts.collar);
        cuts.push_back(b - opts.collar);
        cuts.push_back(b + opts.collar);
      }
    }
  }
  for (const auto& s : hs) {
    cuts.push_back(s.begin);
    cuts.push_back(s.end);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  const auto nr = static_cast<Eigen::Index>(ref_names.size());
  const auto nh = static_cast<Eigen::Index>(hyp_names.size());
  struct Piece {
    double dur;
    std::vector<int> ref, hyp;
  };
  std::vector<Piece> pieces;
  Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(nr, nh);
  auto active = [](const std::vector<Span>& spans, double t, std::size_t n) {
    std::vector<char> on(n, 0);
    for (const auto& s : spans)
      if (s.begin <= t && t < s.end) on[static_cast<std::size_t>(s.speaker)] = 1;
    std::vector<int> ids;
    for (std::size_t k = 0; k < n; ++k)
      if (on[k]) ids.push_back(static_cast<int>(k));
    return ids;
  };
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double mid = 0.5 * (cuts[k] + cuts[k + 1]);
    if (std::any_of(collars.begin(), collars.end(), [&](auto& c) { return c.first <= mid && mid < c.second; }))
      continue;
    Piece p{cuts[k + 1] - cuts[k], active(rs, mid, ref_names.size()), active(hs, mid, hyp_names.size())};
    if (p.ref.empty() && p.hyp.empty()) continue;
    for (int r : p.ref)
      for (int h : p.hyp) overlap(r, h) += p.dur;
    pieces.push_back(std::move(p));
  }

  const auto map = max_weight_assignment(overlap);
  std::vector<int> hyp_to_ref(hyp_names.size(), -1);
  for (std::size_t r = 0; r < map.size(); ++r)
    if (map[r] >= 0) hyp_to_ref[static_cast<std::size_t>(map[r])] = static_cast<int>(r);

  DerCounts c;
  for (const auto& p : pieces) {
    const auto n_ref = static_cast<double>(p.ref.size());
    const auto n_hyp = static_cast<double>(p.hyp.size());
    double correct = 0.0;
    for (int h : p.hyp) {
      const int r = hyp_to_ref[static_cast<std::size_t>(h)];
      if (r >= 0 && std::find(p.ref.begin(), p.ref.end(), r) != p.ref.end()) correct += 1.0;
    }
    c.scored += p.dur * n_ref;
    c.missed += p.dur * std::max(0.0, n_ref - n_hyp);
    c.false_alarm += p.dur * std::max(0.0, n_hyp - n_ref);
    c.confusion += p.dur * (std::min(n_ref, n_hyp) - correct);
  }
  if (!(c.scored > 0.0)) throw ScoringError("reference " + ref.recording + " has no scored speech");
  return c;
}

DerReport score(std::span<const Timeline> ref, std::span<const Timeline> hyp, const DerOptions& opts) {
  std::map<std::string, const Timeline*> hyps;
  for (const auto& h : hyp) hyps[h.recording] = &h;
  std::map<std::string, DerCounts> per;
  for (const auto& r : ref) {
    const auto it = hyps.find(r.recording);
    Timeline empty{r.recording, {}};
    if (it == hyps.end()) warn("no hypothesis for recording " + r.recording + "; scoring it as missed speech");
    per[r.recording] += der(r, it == hyps.end() ? empty : *it->second, opts);
    if (it != hyps.end()) hyps.erase(it);
  }
  for (const auto& [id, h] : hyps) warn("hypothesis recording " + id + " has no reference; ignored");
  DerReport report;
  for (auto& [id, c] : per) {
    report.recordings.emplace_back(id, c);
    report.total += c;
  }
  if (report.recordings.empty()) throw ScoringError("no reference recordings to score");
  return report;
}

void write_report_table(std::ostream& os, const DerReport& report) {
  std::size_t width = 9;
  for (const auto& [id, c] : report.recordings) width = std::max(width, id.size());
  auto row = [&](const std::string& id, const DerCounts& c) {
    os << std::left << std::setw(static_cast<int>(width)) << id << std::right << std::fixed << std::setprecision(2)
       << std::setw(10) << c.scored << std::setw(8) << 100.0 * c.missed_rate() << std::setw(8)
       << 100.0 * c.false_alarm_rate() << std::setw(8) << 100.0 * c.confusion_rate() << std::setw(8)
       << 100.0 * c.der() << '\n';
  };
  os << std::left << std::setw(static_cast<int>(width)) << "recording" << std::right << std::setw(10) << "scored_s"
     << std::setw(8) << "miss%" << std::setw(8) << "fa%" << std::setw(8) << "conf%" << std::setw(8) << "DER%" << '\n';
  for (const auto& [id, c] : report.recordings) row(id, c);
  row("TOTAL", report.total);
}

void write_report_tsv(std::ostream& os, const DerReport& report) {
  os << "recording\tscored\tmissed\tfalse_alarm\tconfusion\tder\n";
  auto row = [&](const std::string& id, const DerCounts& c) {
    os << id << '\t' << format_double(c.scored) << '\t' << format_double(c.missed_rate()) << '\t'
       << format_double(c.false_alarm_rate()) << '\t' << format_double(c.confusion_rate()) << '\t'
       << format_double(c.der()) << '\n';
  };
  for (const auto& [id, c] : report.recordings) row(id, c);
  row("TOTAL", report.total);
}

}  // namespace pdiar
