#include "pdiar/model_io.hpp"

#include <fstream>
#include <sstream>

#include "pdiar/corpus.hpp"
#include "pdiar/errors.hpp"

namespace pdiar {

void DiarizationModel::validate() const {
  extractor.validate();
  plda.validate();
  if (plda.dim() != extractor.dim()) {
    throw ShapeError("model: PLDA has " + std::to_string(plda.dim()) + " dims, extractor produces " +
                     std::to_string(extractor.dim()));
  }
}

void write_parameters(const std::filesystem::path& path, const std::string& kind, const ParameterMap& params) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "#pdiar-" << kind << ' ' << kModelFormatVersion << '\n';
  for (const auto& [name, m] : params) {
    os << name << ' ' << m.rows() << ' ' << m.cols();
    for (Eigen::Index i = 0; i < m.size(); ++i) os << ' ' << format_double(m.data()[i]);
    os << '\n';
  }
  if (!os) throw DataError("failed writing " + path.string());
}

ParameterMap read_parameters(const std::filesystem::path& path, const std::string& kind) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ParseError(path.string() + ": empty file");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    hs >> magic >> version;
    if (magic != "#pdiar-" + kind) throw ParseError(path.string() + ": not a pdiar " + kind + " file");
    if (version != kModelFormatVersion) {
      throw ParseError(path.string() + ": unsupported " + kind + " format version " + std::to_string(version));
    }
  }
  ParameterMap out;
  long line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    long rows = -1, cols = -1;
    if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0) throw ParseError(ctx + ": bad parameter header");
    Eigen::MatrixXd m(rows, cols);
    std::string tok;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (!(ls >> tok)) throw ParseError(ctx + ": " + name + " has too few values");
      m.data()[i] = parse_double(tok, ctx);
    }
    if (ls >> tok) throw ParseError(ctx + ": " + name + " has too many values");
    if (!out.emplace(name, std::move(m)).second) throw ParseError(ctx + ": duplicate parameter " + name);
  }
  return out;
}

ParameterMap to_parameters(const DiarizationModel& model, const std::string& prefix) {
  const auto& net = model.extractor.net;
  return {{prefix + "plda.w", model.plda.w},
          {prefix + "transform", model.extractor.transform},
          {prefix + "net.W1", net.W1},
          {prefix + "net.b1", net.b1},
          {prefix + "net.W2", net.W2},
          {prefix + "net.b2", net.b2}};
}

namespace {

Eigen::MatrixXd take(ParameterMap& params, const std::string& name) {
  auto node = params.extract(name);
  if (node.empty()) throw ParseError("model file lacks parameter " + name);
  return std::move(node.mapped());
}

Eigen::VectorXd take_vector(ParameterMap& params, const std::string& name) {
  Eigen::MatrixXd m = take(params, name);
  if (m.cols() != 1) throw ParseError("parameter " + name + " must be a column vector");
  return m.col(0);
}

}  // namespace

DiarizationModel from_parameters(ParameterMap& params, const std::string& prefix) {
  DiarizationModel m;
  m.plda.w = take_vector(params, prefix + "plda.w");
  m.extractor.transform = take(params, prefix + "transform");
  m.extractor.net.W1 = take(params, prefix + "net.W1");
  m.extractor.net.b1 = take_vector(params, prefix + "net.b1");
  m.extractor.net.W2 = take(params, prefix + "net.W2");
  m.extractor.net.b2 = take_vector(params, prefix + "net.b2");
  try {
    m.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("model parameters are inconsistent: ") + e.what());
  }
  return m;
}

void save_model(const std::filesystem::path& path, const DiarizationModel& model) {
  model.validate();
  write_parameters(path, "model", to_parameters(model));
}

DiarizationModel load_model(const std::filesystem::path& path) {
  auto params = read_parameters(path, "model");
  auto model = from_parameters(params);
  if (!params.empty()) throw ParseError(path.string() + ": unknown parameter " + params.begin()->first);
  return model;
}

}  // namespace pdiar
