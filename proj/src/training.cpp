#include "pdiar/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "pdiar/log.hpp"

namespace pdiar {

// ---------------------------------------------------------------- sampling

OctetSampler::OctetSampler(std::vector<const Recording*> recordings, int n, Rng rng) : n_(n), rng_(std::move(rng)) {
  if (n < 1) throw DomainError("octet size must be >= 1");
  std::size_t skipped = 0;
  for (const auto* r : recordings) {
    if (r->segments.size() >= static_cast<std::size_t>(n)) {
      recordings_.push_back(r);
      total_segments_ += r->segments.size();
    } else {
      ++skipped;
    }
  }
  if (skipped > 0) {
    warn(std::to_string(skipped) + " recording(s) with fewer than " + std::to_string(n) +
         " segments skipped for trial sampling");
  }
  if (recordings_.empty()) throw DataError("no recording has at least " + std::to_string(n) + " segments");
}

OctetTrial OctetSampler::next() {
  const auto& rec =
      *recordings_[std::uniform_int_distribution<std::size_t>(0, recordings_.size() - 1)(rng_)];
  scratch_.resize(rec.segments.size());
  for (std::size_t i = 0; i < scratch_.size(); ++i) scratch_[i] = i;
  // Partial Fisher-Yates: the first n entries are a uniformly random ordered sample.
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_); ++i) {
    const auto j = std::uniform_int_distribution<std::size_t>(i, scratch_.size() - 1)(rng_);
    std::swap(scratch_[i], scratch_[j]);
  }
  OctetTrial trial;
  std::vector<std::string> speakers;
  for (int t = 0; t < n_; ++t) {
    const auto& seg = rec.segments[scratch_[static_cast<std::size_t>(t)]];
    trial.records.push_back(seg.record);
    speakers.push_back(seg.speaker);
  }
  trial.truth = canonicalize(speakers);
  return trial;
}

std::vector<OctetTrial> OctetSampler::draw(std::size_t count) {
  std::vector<OctetTrial> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(next());
  return out;
}

// ---------------------------------------------------------------- gradients

GradientSet GradientSet::zeros_like(const DiarizationModel& model) {
  return {Eigen::VectorXd::Zero(model.plda.dim()), pdiar::zeros_like(model.extractor)};
}

GradientSet& GradientSet::operator+=(const GradientSet& o) {
  log_w += o.log_w;
  extractor.transform += o.extractor.transform;
  extractor.net.W1 += o.extractor.net.W1;
  extractor.net.b1 += o.extractor.net.b1;
  extractor.net.W2 += o.extractor.net.W2;
  extractor.net.b2 += o.extractor.net.b2;
  return *this;
}

GradientSet& GradientSet::operator*=(double s) {
  log_w *= s;
  extractor.transform *= s;
  extractor.net.W1 *= s;
  extractor.net.b1 *= s;
  extractor.net.W2 *= s;
  extractor.net.b2 *= s;
  return *this;
}

bool GradientSet::all_finite() const {
  const auto& net = extractor.net;
  return log_w.allFinite() && extractor.transform.allFinite() && net.W1.allFinite() && net.b1.allFinite() &&
         net.W2.allFinite() && net.b2.allFinite();
}

namespace {

void check_trial(const OctetTrial& trial, const PartitionTables& tables) {
  if (static_cast<int>(trial.records.size()) != tables.n() || trial.truth.size() != trial.records.size()) {
    throw ShapeError("trial has " + std::to_string(trial.records.size()) + " segments, tables are for " +
                     std::to_string(tables.n()));
  }
}

std::size_t truth_index(const OctetTrial& trial, const PartitionTables& tables) {
  const auto r = tables.index_of(trial.truth);
  if (tables.rgs(r) != trial.truth) throw InternalError("truth label string not found in the partition table");
  return r;
}

// Loss of one trial, and its gradient accumulated into `grad` when non-null.
double trial_loss(const OctetTrial& trial, const DiarizationModel& model, const PartitionTables& tables,
                  GradientSet* grad) {
  check_trial(trial, tables);
  const auto n = static_cast<Eigen::Index>(trial.records.size());
  const Eigen::Index d = model.plda.dim();
  const Eigen::VectorXd& w = model.plda.w;

  Eigen::MatrixXd x(n, d), e(n, d), s(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto emb = extract(trial.records[static_cast<std::size_t>(t)], model.extractor);
    x.row(t) = emb.xhat.transpose();
    e.row(t) = segment_weight(model.plda, emb.prec).transpose();
    // s = w / (w + b): 0 for plug-in precisions, 1 for uninformative ones.
    s.row(t) = (w.array() / (w.array() + emb.prec.array())).transpose();
  }
  const Eigen::MatrixXd a = tables.seg_subset().transpose_multiply(e.cwiseProduct(x));
  const Eigen::MatrixXd b = tables.seg_subset().transpose_multiply(e);
  const Eigen::ArrayXXd inv = (1.0 + b.array()).inverse();
  const Eigen::ArrayXXd ratio = a.array() * inv;
  const Eigen::VectorXd subset_ll = (0.5 * (a.array() * ratio - b.array().log1p()).rowwise().sum()).matrix();
  Eigen::VectorXd scores = tables.part_subset().multiply(subset_ll) + tables.log_prior();
  const double lse = log_sum_exp(scores);
  const auto r = truth_index(trial, tables);
  const double loss = lse - scores(static_cast<Eigen::Index>(r));
  if (grad == nullptr) return loss;

  Eigen::VectorXd g = (scores.array() - lse).exp().matrix();
  g(static_cast<Eigen::Index>(r)) -= 1.0;
  const Eigen::VectorXd gc = tables.part_subset().transpose_multiply(g).col(0);
  const Eigen::MatrixXd ga = (ratio.colwise() * gc.array()).matrix();
  const Eigen::MatrixXd gb = ((ratio.square() + inv).colwise() * (-0.5 * gc.array())).matrix();
  const Eigen::MatrixXd u = tables.seg_subset().multiply_rows(ga);
  const Eigen::MatrixXd v = tables.seg_subset().multiply_rows(gb);
  const Eigen::ArrayXXd d_e = u.array() * x.array() + v.array();
  const Eigen::MatrixXd d_x = (u.array() * e.array()).matrix();
  // de/dw = (1 - s)^2, de/db = s^2; w = exp(log_w).
  grad->log_w += ((d_e * (1.0 - s.array()).square()).colwise().sum().transpose() * w.array()).matrix();
  const Eigen::MatrixXd d_b = (d_e * s.array().square()).matrix();
  for (Eigen::Index t = 0; t < n; ++t) {
    extract_backward(trial.records[static_cast<std::size_t>(t)], model.extractor, d_x.row(t).transpose(),
                     d_b.row(t).transpose(), grad->extractor);
  }
  return loss;
}

}  // namespace

double cross_entropy(std::span<const OctetTrial> batch, const DiarizationModel& model,
                     const PartitionTables& tables) {
  if (batch.empty()) throw DataError("cross_entropy: empty batch");
  double total = 0.0;
  for (const auto& trial : batch) total += trial_loss(trial, model, tables, nullptr);
  return total / static_cast<double>(batch.size());
}

LossAndGradient loss_and_gradients(std::span<const OctetTrial> batch, const DiarizationModel& model,
                                   const PartitionTables& tables) {
  if (batch.empty()) throw DataError("loss_and_gradients: empty batch");
  LossAndGradient out{0.0, GradientSet::zeros_like(model)};
  for (const auto& trial : batch) out.loss += trial_loss(trial, model, tables, &out.grad);
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  out.grad *= inv;
  return out;
}

double GradientCheck::worst() const {
  double m = 0.0;
  for (double e : relative_error) m = std::max(m, e);
  return m;
}

namespace {

struct ParameterGroup {
  std::string name;
  Eigen::Map<Eigen::VectorXd> model;
  Eigen::Map<Eigen::VectorXd> grad;
};

std::vector<ParameterGroup> parameter_groups(DiarizationModel& m, Eigen::VectorXd& log_w, GradientSet& g) {
  auto map = [](auto& x) { return Eigen::Map<Eigen::VectorXd>(x.data(), x.size()); };
  auto& net = m.extractor.net;
  auto& gn = g.extractor.net;
  return {{"log_w", map(log_w), map(g.log_w)},
          {"transform", map(m.extractor.transform), map(g.extractor.transform)},
          {"net.W1", map(net.W1), map(gn.W1)},
          {"net.b1", map(net.b1), map(gn.b1)},
          {"net.W2", map(net.W2), map(gn.W2)},
          {"net.b2", map(net.b2), map(gn.b2)}};
}

}  // namespace

GradientCheck check_gradients(std::span<const OctetTrial> batch, const DiarizationModel& model,
                              const PartitionTables& tables, double step, double floor) {
  auto analytic = loss_and_gradients(batch, model, tables).grad;
  DiarizationModel probe = model;
  Eigen::VectorXd log_w = model.plda.w.array().log().matrix();
  auto numeric = GradientSet::zeros_like(model);
  auto groups = parameter_groups(probe, log_w, numeric);
  auto dummy_log_w = analytic.log_w;
  auto analytic_groups = parameter_groups(probe, dummy_log_w, analytic);

  GradientCheck out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& grp = groups[gi];
    for (Eigen::Index i = 0; i < grp.model.size(); ++i) {
      const double keep = grp.model(i);
      auto eval = [&](double value) {
        grp.model(i) = value;
        probe.plda.w = log_w.array().exp().matrix();
        return cross_entropy(batch, probe, tables);
      };
      const double up = eval(keep + step);
      const double down = eval(keep - step);
      eval(keep);
      grp.grad(i) = (up - down) / (2.0 * step);
    }
    const auto& an = analytic_groups[gi].grad;
    const double scale = std::max({an.norm(), grp.grad.norm(), floor});
    out.groups.push_back(grp.name);
    out.relative_error.push_back(scale > 0.0 ? (an - grp.grad).norm() / scale : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw DomainError(std::string("train config: ") + what);
  };
  require(n >= 1 && n <= kMaxEnumerate, "n must be in [1, 12]");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lr_net >= 0.0 && std::isfinite(lr_net), "lr_net must be finite and >= 0");
  require(lr_ratio > 0.0 && lr_ratio <= 1.0, "lr_ratio must be in (0, 1]");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(epochs >= 0, "epochs must be >= 0");
  require(monitor_trials >= 1, "monitor_trials must be >= 1");
  if (prior) prior->validate();
}

CrpFit fit_training_prior(const std::vector<const Recording*>& train) {
  int segments = 0;
  int speakers = 0;
  for (const auto* r : train) {
    segments += static_cast<int>(r->segments.size());
    std::set<std::string> names;
    for (const auto& s : r->segments) names.insert(s.speaker);
    speakers += static_cast<int>(names.size());
  }
  if (segments == 0) throw DataError("no training segments for the prior fit");
  return fit_crp(segments, speakers);
}

namespace {

void sgd_step(DiarizationModel& m, GradientSet& velocity, const GradientSet& g, const TrainConfig& cfg) {
  const double mu = cfg.momentum;
  velocity *= mu;
  velocity += g;
  const double lr_plda = cfg.lr_net * cfg.lr_ratio;
  m.plda.w = (m.plda.w.array().log() - lr_plda * velocity.log_w.array()).exp().matrix();
  m.extractor.transform -= lr_plda * velocity.extractor.transform;
  if (cfg.train_net) {
    auto& net = m.extractor.net;
    const auto& v = velocity.extractor.net;
    net.W1 -= cfg.lr_net * v.W1;
    net.b1 -= cfg.lr_net * v.b1;
    net.W2 -= cfg.lr_net * v.W2;
    net.b2 -= cfg.lr_net * v.b2;
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DiarizationModel& init, const std::vector<const Recording*>& train_set,
                  const std::vector<const Recording*>& heldout,
                  const std::function<void(const EpochStats&, const Checkpoint&)>& on_epoch) {
  cfg.validate();
  init.validate();
  if (train_set.empty()) throw DataError("no training recordings");
  const CrpParams prior = cfg.prior ? *cfg.prior : fit_training_prior(train_set).params;
  const auto tables =
      cfg.table_cache.empty() ? build_tables(cfg.n, prior) : cached_tables(cfg.n, prior, cfg.table_cache);

  OctetSampler sampler(train_set, cfg.n, substream(cfg.seed, "sampler"));
  const auto monitor_train =
      OctetSampler(train_set, cfg.n, substream(cfg.seed, "monitor-train")).draw(static_cast<std::size_t>(cfg.monitor_trials));
  std::vector<OctetTrial> monitor_heldout;
  if (!heldout.empty()) {
    monitor_heldout = OctetSampler(heldout, cfg.n, substream(cfg.seed, "monitor-heldout"))
                          .draw(static_cast<std::size_t>(cfg.monitor_trials));
  }

  Checkpoint ckpt{init, GradientSet::zeros_like(init), prior, 0};
  if (cfg.check) {
    auto check_rng = substream(cfg.seed, "check");
    OctetSampler check_sampler(train_set, cfg.n, std::move(check_rng));
    for (int b = 0; b < 10; ++b) {
      const auto batch = check_sampler.draw(4);
      const auto report = check_gradients(batch, init, tables, 1e-5, 1e-8);
      if (report.worst() >= 1e-5) {
        throw InternalError("gradient check failed: relative error " + std::to_string(report.worst()));
      }
    }
  }

  TrainResult result{init, prior, {}};
  auto monitor = [&](int epoch, const DiarizationModel& m) {
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = cross_entropy(monitor_train, m, tables);
    st.heldout_loss = monitor_heldout.empty() ? std::nan("") : cross_entropy(monitor_heldout, m, tables);
    return st;
  };
  result.history.push_back(monitor(0, init));
  if (on_epoch) on_epoch(result.history.back(), ckpt);

  const std::size_t trials_per_epoch = std::max<std::size_t>(1, sampler.total_segments() / static_cast<std::size_t>(cfg.n));
  const std::size_t batches = (trials_per_epoch + static_cast<std::size_t>(cfg.batch_size) - 1) /
                              static_cast<std::size_t>(cfg.batch_size);
  DiarizationModel model = init;
  GradientSet velocity = GradientSet::zeros_like(init);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t b = 0; b < batches; ++b) {
      const auto batch = sampler.draw(static_cast<std::size_t>(cfg.batch_size));
      const auto lg = loss_and_gradients(batch, model, tables);
      if (!std::isfinite(lg.loss) || !lg.grad.all_finite()) {
        throw TrainingError("training diverged in epoch " + std::to_string(epoch) + " (non-finite loss or gradient)",
                            ckpt);
      }
      sgd_step(model, velocity, lg.grad, cfg);
      const auto& net = model.extractor.net;
      if (!model.plda.w.allFinite() || !(model.plda.w.array() > 0.0).all() || !model.extractor.transform.allFinite() ||
          !net.W1.allFinite() || !net.b1.allFinite() || !net.W2.allFinite() || !net.b2.allFinite()) {
        throw TrainingError("training diverged in epoch " + std::to_string(epoch) + " (non-finite parameters)", ckpt);
      }
    }
    const auto st = monitor(epoch, model);
    if (!std::isfinite(st.train_loss)) {
      throw TrainingError("training diverged after epoch " + std::to_string(epoch), ckpt);
    }
    ckpt = Checkpoint{model, velocity, prior, epoch};
    result.history.push_back(st);
    if (on_epoch) on_epoch(st, ckpt);
  }
  result.model = std::move(model);
  return result;
}

void write_history(const std::filesystem::path& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch\ttrain_ce\theldout_ce\n";
  for (const auto& h : history) {
    os << h.epoch << '\t' << format_double(h.train_loss) << '\t' << format_double(h.heldout_loss) << '\n';
  }
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto params = to_parameters(ckpt.model, "model.");
  const auto& v = ckpt.velocity;
  params.emplace("velocity.log_w", v.log_w);
  params.emplace("velocity.transform", v.extractor.transform);
  params.emplace("velocity.net.W1", v.extractor.net.W1);
  params.emplace("velocity.net.b1", v.extractor.net.b1);
  params.emplace("velocity.net.W2", v.extractor.net.W2);
  params.emplace("velocity.net.b2", v.extractor.net.b2);
  params.emplace("prior", Eigen::RowVector2d(ckpt.prior.concentration, ckpt.prior.discount));
  params.emplace("epoch", Eigen::Matrix<double, 1, 1>(ckpt.epoch));
  write_parameters(path, "checkpoint", params);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto params = read_parameters(path, "checkpoint");
  Checkpoint c;
  c.model = from_parameters(params, "model.");
  auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto node = params.extract(name);
    if (node.empty()) throw ParseError(path.string() + ": lacks " + name);
    if (node.mapped().rows() != rows || node.mapped().cols() != cols) {
      throw ParseError(path.string() + ": " + name + " has the wrong shape");
    }
    return Eigen::MatrixXd(std::move(node.mapped()));
  };
  const auto& m = c.model.extractor;
  c.velocity.log_w = take("velocity.log_w", c.model.plda.dim(), 1).col(0);
  c.velocity.extractor.transform = take("velocity.transform", m.transform.rows(), m.transform.cols());
  c.velocity.extractor.net.W1 = take("velocity.net.W1", m.net.W1.rows(), m.net.W1.cols());
  c.velocity.extractor.net.b1 = take("velocity.net.b1", m.net.b1.size(), 1).col(0);
  c.velocity.extractor.net.W2 = take("velocity.net.W2", m.net.W2.rows(), m.net.W2.cols());
  c.velocity.extractor.net.b2 = take("velocity.net.b2", m.net.b2.size(), 1).col(0);
  const auto prior = take("prior", 1, 2);
  c.prior = {prior(0, 0), prior(0, 1)};
  c.epoch = static_cast<int>(take("epoch", 1, 1)(0, 0));
  if (!params.empty()) throw ParseError(path.string() + ": unknown parameter " + params.begin()->first);
  try {
    c.prior.validate();
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace pdiar
