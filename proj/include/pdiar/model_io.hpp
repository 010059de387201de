#pragma once

// Text serialization of trained systems.
//
// A model file starts with "#pdiar-model <version>" and holds one parameter
// per line: "<name> <rows> <cols> <values in column-major order>". Values use
// 17 significant digits, so a save/load cycle is exact. Unknown or missing
// names are parse errors.

#include <filesystem>
#include <map>
#include <string>

#include <Eigen/Core>

#include "pdiar/extractor.hpp"
#include "pdiar/plda.hpp"

namespace pdiar {

inline constexpr int kModelFormatVersion = 1;

/// Extractor plus the diagonal PLDA it feeds: everything diarization needs.
struct DiarizationModel {
  ExtractorModel extractor;
  DiagPldad plda;

  /// Shapes agree and every parameter is finite with w > 0.
  void validate() const;
};

/// Named matrices in file order; the building block of model and checkpoint files.
using ParameterMap = std::map<std::string, Eigen::MatrixXd>;

void write_parameters(const std::filesystem::path& path, const std::string& kind, const ParameterMap& params);
/// Reads a file written by write_parameters with the same `kind`.
ParameterMap read_parameters(const std::filesystem::path& path, const std::string& kind);

ParameterMap to_parameters(const DiarizationModel& model, const std::string& prefix = "");
/// Takes the entries under `prefix` out of `params`.
DiarizationModel from_parameters(ParameterMap& params, const std::string& prefix = "");

void save_model(const std::filesystem::path& path, const DiarizationModel& model);
DiarizationModel load_model(const std::filesystem::path& path);

}  // namespace pdiar
