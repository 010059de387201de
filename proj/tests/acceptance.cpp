// Acceptance criteria 1-9, one PASS/FAIL line each. Exit status is the number
// of failing criteria.

#include <chrono>
#include <iostream>

#include "pdiar/log.hpp"
#include "pdiar/selftest.hpp"

int main() {
  pdiar::set_warning_handler([](std::string_view) {});
  auto checks = pdiar::run_fast_checks();
  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = pdiar::run_seeded_experiments({1, 2, 3}, 1, [](const std::string& m) { std::cerr << m << '\n'; });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  checks.insert(checks.begin() + 6, pdiar::check_system_ordering(runs, seconds));
  checks.insert(checks.begin() + 7, pdiar::check_calibration_drift(runs));
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::cout << "seed " << i + 1 << '\n';
    pdiar::write_results_table(std::cout, runs[i]);
  }
  int failed = 0;
  for (const auto& c : checks) {
    std::cout << pdiar::format_check(c) << '\n';
    failed += c.pass ? 0 : 1;
  }
  return failed;
}
