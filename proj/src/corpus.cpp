#include "pdiar/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "pdiar/errors.hpp"
#include "pdiar/rng.hpp"

namespace pdiar {

std::string Recording::subset() const { return id.substr(0, id.find('-')); }

LabelString Recording::truth() const {
  std::vector<std::string> speakers;
  speakers.reserve(segments.size());
  for (const auto& s : segments) speakers.push_back(s.speaker);
  return canonicalize(speakers);
}

std::vector<SegmentRecord> Recording::records() const {
  std::vector<SegmentRecord> out;
  out.reserve(segments.size());
  for (const auto& s : segments) out.push_back(s.record);
  return out;
}

std::vector<const Recording*> Corpus::subset(const std::string& name) const {
  std::vector<const Recording*> out;
  for (const auto& r : recordings) {
    if (r.subset() == name) out.push_back(&r);
  }
  return out;
}

void SyntheticConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw DomainError(std::string("synthetic config: ") + what);
  };
  require(dim > 0 && raw_dim >= dim, "need 0 < dim <= raw_dim");
  require(quality_dim >= 2, "quality_dim must be >= 2");
  require(n_recordings >= 4, "n_recordings must be >= 4");
  require(segments_per_recording >= 1, "segments_per_recording must be >= 1");
  require(min_speakers_per_recording >= 1 && max_speakers_per_recording >= min_speakers_per_recording,
          "bad speakers-per-recording range");
  require(n_speakers >= 8 * max_speakers_per_recording, "n_speakers too small for the subset split");
  require(change_prob >= 0.0 && change_prob <= 1.0, "change_prob must be in [0, 1]");
  require(within_precision_min > 0.0 && within_precision_max >= within_precision_min, "bad within precision range");
  require(weak_speaker_variance > 0.0, "weak_speaker_variance must be > 0");
  require(log_noise_max >= log_noise_min, "bad log noise range");
  require(duration_min > 0.0 && duration_max >= duration_min, "bad duration range");
  require(quality_noise >= 0.0, "quality_noise must be >= 0");
  require(plda_speakers >= 2 && plda_segments_per_speaker >= 2, "need >= 2 plda speakers with >= 2 segments");
  require(plda_noise_scale >= 0.0 && plda_duration > 0.0, "bad plda segment settings");
}

namespace {

std::string numbered(const std::string& prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%04d", prefix.c_str(), i);
  return buf;
}

}  // namespace

Eigen::VectorXd sample_speaker(const SyntheticTruth& truth, Rng& rng) {
  std::normal_distribution<double> gauss;
  return truth.between_variance.cwiseSqrt().unaryExpr([&](double s) { return s * gauss(rng); });
}

SyntheticCorpus generate_corpus(const SyntheticConfig& cfg) {
  cfg.validate();
  auto rng = substream(cfg.seed, "corpus");
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit;
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const Eigen::Index r = cfg.raw_dim;

  SyntheticCorpus out;
  auto& truth = out.truth;
  {
    const Eigen::MatrixXd g = Eigen::MatrixXd::NullaryExpr(r, r, [&] { return gauss(rng); });
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    const Eigen::VectorXd s = Eigen::VectorXd::NullaryExpr(r, [&] { return uniform(0.7, 1.4); });
    truth.mixing = q * s.asDiagonal();
  }
  truth.within_precision = Eigen::VectorXd::NullaryExpr(r, [&] {
    return std::exp(uniform(std::log(cfg.within_precision_min), std::log(cfg.within_precision_max)));
  });
  truth.between_variance = Eigen::VectorXd::Constant(r, cfg.weak_speaker_variance);
  truth.between_variance.head(cfg.dim).setOnes();
  truth.noise_profile = Eigen::VectorXd::NullaryExpr(r, [&] { return std::exp(uniform(std::log(0.5), std::log(2.0))); });
  Eigen::VectorXd gains(cfg.quality_dim - 1);
  for (auto& g : gains) g = uniform(0.5, 1.5) * (unit(rng) < 0.5 ? -1.0 : 1.0);

  auto draw_speaker = [&] { return sample_speaker(truth, rng); };
  auto make_segment = [&](const Eigen::VectorXd& y, double duration, double noise_scale) {
    Segment seg;
    const double u = uniform(cfg.log_noise_min, cfg.log_noise_max);
    Eigen::VectorXd latent(r);
    seg.oracle_prec.resize(r);
    for (Eigen::Index j = 0; j < r; ++j) {
      const double clean = y(j) + gauss(rng) / std::sqrt(truth.within_precision(j));
      const double var = cfg.noiseless ? 0.0 : noise_scale * std::exp(u) * truth.noise_profile(j) / duration;
      latent(j) = clean + std::sqrt(var) * gauss(rng);
      seg.oracle_prec(j) = var > 0.0 ? 1.0 / var : std::numeric_limits<double>::infinity();
    }
    seg.record.raw = truth.mixing * latent;
    seg.record.duration = duration;
    seg.record.quality.resize(cfg.quality_dim);
    for (int i = 0; i + 1 < cfg.quality_dim; ++i) {
      const double f = gains(i) * u + cfg.quality_noise * gauss(rng);
      seg.record.quality(i) = cfg.reciprocal_quality ? std::exp(-f) : f;
    }
    seg.record.quality(cfg.quality_dim - 1) = duration;
    return seg;
  };

  // Disjoint speaker pools per subset.
  const int n_train_part = static_cast<int>(std::lround(0.6 * cfg.n_speakers));
  const int n_dev = static_cast<int>(std::lround(0.2 * cfg.n_speakers));
  const int n_train = static_cast<int>(std::lround(0.75 * n_train_part));
  const std::vector<std::pair<std::string, int>> speaker_split{
      {"train", n_train}, {"heldout", n_train_part - n_train}, {"dev", n_dev},
      {"eval", cfg.n_speakers - n_train_part - n_dev}};
  const int r_train_part = static_cast<int>(std::lround(0.6 * cfg.n_recordings));
  const int r_dev = static_cast<int>(std::lround(0.2 * cfg.n_recordings));
  const int r_train = std::max(1, static_cast<int>(std::lround(0.75 * r_train_part)));
  const std::vector<int> recording_split{r_train, std::max(1, r_train_part - r_train), std::max(1, r_dev),
                                         std::max(1, cfg.n_recordings - r_train_part - r_dev)};

  int speaker_counter = 0;
  for (std::size_t s = 0; s < speaker_split.size(); ++s) {
    const auto& [subset, pool_size] = speaker_split[s];
    std::vector<Eigen::VectorXd> ys;
    std::vector<std::string> names;
    for (int k = 0; k < pool_size; ++k) {
      ys.push_back(draw_speaker());
      names.push_back(numbered("spk", ++speaker_counter));
    }
    for (int rec_i = 0; rec_i < recording_split[s]; ++rec_i) {
      Recording rec;
      rec.id = numbered(subset, rec_i + 1);
      const int hi = std::min(cfg.max_speakers_per_recording, pool_size);
      const int lo = std::min(cfg.min_speakers_per_recording, hi);
      const int k = std::uniform_int_distribution<int>(lo, hi)(rng);
      std::vector<int> pool(static_cast<std::size_t>(pool_size));
      std::iota(pool.begin(), pool.end(), 0);
      std::shuffle(pool.begin(), pool.end(), rng);
      pool.resize(static_cast<std::size_t>(k));

      int current = 0;
      double clock = 0.0;
      for (int t = 0; t < cfg.segments_per_recording; ++t) {
        if (t > 0 && k > 1 && unit(rng) < cfg.change_prob) {
          current = (current + std::uniform_int_distribution<int>(1, k - 1)(rng)) % k;
        }
        const int who = pool[static_cast<std::size_t>(current)];
        Segment seg = make_segment(ys[static_cast<std::size_t>(who)], uniform(cfg.duration_min, cfg.duration_max), 1.0);
        seg.id = numbered("seg", t);
        seg.start = clock;
        seg.speaker = names[static_cast<std::size_t>(who)];
        clock += seg.record.duration;
        rec.segments.push_back(std::move(seg));
      }
      out.corpus.recordings.push_back(std::move(rec));
    }
  }

  for (int k = 0; k < cfg.plda_speakers; ++k) {
    const Eigen::VectorXd y = draw_speaker();
    const std::string name = numbered("spk", ++speaker_counter);
    Recording rec;
    rec.id = numbered("plda", k + 1);
    double clock = 0.0;
    for (int t = 0; t < cfg.plda_segments_per_speaker; ++t) {
      Segment seg = make_segment(y, cfg.plda_duration, cfg.plda_noise_scale);
      seg.id = numbered("seg", t);
      seg.start = clock;
      seg.speaker = name;
      clock += seg.record.duration;
      rec.segments.push_back(std::move(seg));
    }
    out.corpus.recordings.push_back(std::move(rec));
  }

  out.corpus.raw_dim = r;
  out.corpus.quality_dim = cfg.quality_dim;
  return out;
}

// ---------------------------------------------------------------- text I/O

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view text, const std::string& context) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    // from_chars does not accept "inf"/"nan" spellings from printf in all libraries.
    if (text == "inf" || text == "+inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    throw ParseError(context + ": cannot parse number '" + std::string(text) + "'");
  }
  return v;
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

long header_value(const std::vector<std::string>& fields, const std::string& key, const std::string& ctx) {
  for (const auto& f : fields) {
    if (f.rfind(key + "=", 0) == 0) {
      try {
        return std::stol(f.substr(key.size() + 1));
      } catch (const std::exception&) {
        break;
      }
    }
  }
  throw ParseError(ctx + ": header lacks a valid " + key);
}

}  // namespace

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write corpus " + path.string());
  os << "#pdiar-corpus 1 raw_dim=" << corpus.raw_dim << " quality_dim=" << corpus.quality_dim << '\n';
  os << "# recording segment start duration raw[" << corpus.raw_dim << "] quality[" << corpus.quality_dim
     << "] speaker\n";
  for (const auto& rec : corpus.recordings) {
    for (const auto& seg : rec.segments) {
      os << rec.id << ' ' << seg.id << ' ' << format_double(seg.start) << ' ' << format_double(seg.record.duration);
      for (double v : seg.record.raw) os << ' ' << format_double(v);
      for (double v : seg.record.quality) os << ' ' << format_double(v);
      os << ' ' << seg.speaker << '\n';
    }
  }
  if (!os) throw DataError("failed writing corpus " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open corpus " + path.string());
  Corpus corpus;
  bool have_header = false;
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#pdiar-corpus", 0) == 0) {
        const auto f = split_ws(line);
        if (f.size() < 2 || f[1] != "1") throw ParseError(ctx + ": unsupported corpus version");
        corpus.raw_dim = header_value(f, "raw_dim", ctx);
        corpus.quality_dim = header_value(f, "quality_dim", ctx);
        if (corpus.raw_dim <= 0 || corpus.quality_dim <= 0) throw ParseError(ctx + ": bad dimensions");
        have_header = true;
      }
      continue;
    }
    if (!have_header) throw ParseError(ctx + ": data before #pdiar-corpus header");
    const auto f = split_ws(line);
    const auto expected = static_cast<std::size_t>(5 + corpus.raw_dim + corpus.quality_dim);
    if (f.size() != expected) {
      throw ParseError(ctx + ": expected " + std::to_string(expected) + " fields, found " + std::to_string(f.size()));
    }
    Segment seg;
    seg.id = f[1];
    seg.start = parse_double(f[2], ctx);
    seg.record.duration = parse_double(f[3], ctx);
    if (!(seg.record.duration > 0.0) || !std::isfinite(seg.start)) {
      throw ParseError(ctx + ": duration must be > 0 and start finite");
    }
    seg.record.raw.resize(corpus.raw_dim);
    seg.record.quality.resize(corpus.quality_dim);
    std::size_t c = 4;
    for (Eigen::Index j = 0; j < corpus.raw_dim; ++j) seg.record.raw(j) = parse_double(f[c++], ctx);
    for (Eigen::Index j = 0; j < corpus.quality_dim; ++j) seg.record.quality(j) = parse_double(f[c++], ctx);
    if (!seg.record.raw.allFinite() || !seg.record.quality.allFinite()) {
      throw ParseError(ctx + ": non-finite feature value");
    }
    seg.speaker = f[c];
    if (corpus.recordings.empty() || corpus.recordings.back().id != f[0]) {
      corpus.recordings.push_back(Recording{f[0], {}});
    }
    corpus.recordings.back().segments.push_back(std::move(seg));
  }
  if (!have_header) throw ParseError(path.string() + ": missing #pdiar-corpus header");
  return corpus;
}

void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddedSegment>& segments) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write embeddings " + path.string());
  const Eigen::Index dim = segments.empty() ? 0 : segments.front().embedding.dim();
  os << "#pdiar-embeddings 1 dim=" << dim << '\n';
  for (const auto& s : segments) {
    if (s.embedding.dim() != dim || s.embedding.prec.size() != dim) {
      throw ShapeError("write_embeddings: inconsistent embedding dimensions");
    }
    os << s.recording << ' ' << s.segment << ' ' << format_double(s.start) << ' ' << format_double(s.duration);
    for (double v : s.embedding.xhat) os << ' ' << format_double(v);
    for (double v : s.embedding.prec) os << ' ' << format_double(v);
    os << '\n';
  }
  if (!os) throw DataError("failed writing embeddings " + path.string());
}

std::vector<EmbeddedSegment> read_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open embeddings " + path.string());
  std::vector<EmbeddedSegment> out;
  long dim = -1;
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#pdiar-embeddings", 0) == 0) {
        const auto f = split_ws(line);
        if (f.size() < 2 || f[1] != "1") throw ParseError(ctx + ": unsupported embeddings version");
        dim = header_value(f, "dim", ctx);
      }
      continue;
    }
    if (dim < 0) throw ParseError(ctx + ": data before #pdiar-embeddings header");
    const auto f = split_ws(line);
    if (f.size() != static_cast<std::size_t>(4 + 2 * dim)) throw ParseError(ctx + ": wrong number of fields");
    EmbeddedSegment s;
    s.recording = f[0];
    s.segment = f[1];
    s.start = parse_double(f[2], ctx);
    s.duration = parse_double(f[3], ctx);
    if (!(s.duration > 0.0)) throw ParseError(ctx + ": duration must be > 0");
    s.embedding.xhat.resize(dim);
    s.embedding.prec.resize(dim);
    for (long j = 0; j < dim; ++j) s.embedding.xhat(j) = parse_double(f[4 + j], ctx);
    for (long j = 0; j < dim; ++j) {
      s.embedding.prec(j) = parse_double(f[4 + dim + j], ctx);
      if (!(s.embedding.prec(j) >= 0.0)) throw ParseError(ctx + ": precision must be >= 0");
    }
    out.push_back(std::move(s));
  }
  if (dim < 0) throw ParseError(path.string() + ": missing #pdiar-embeddings header");
  return out;
}

}  // namespace pdiar
