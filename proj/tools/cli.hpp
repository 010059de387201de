#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pdiar::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kData = 2;
inline constexpr int kNumeric = 3;

/// Runs the command line (args exclude the program name). Regular output goes
/// to `out`; errors go to `err` as "pdiar-error: <usage|data|numeric>: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pdiar::cli
