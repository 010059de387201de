#pragma once

// Acceptance checks. Each returns one verdict with a short numeric summary;
// `pdiar selftest` and the acceptance test binary both run them.

#include <functional>
#include <string>
#include <vector>

#include "pdiar/experiment.hpp"

namespace pdiar {

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

CheckResult check_partition_counts();     // 1
CheckResult check_posterior_oracle();     // 2
CheckResult check_uncertainty_limits();   // 3
CheckResult check_gradients();            // 4
CheckResult check_crp();                  // 5
CheckResult check_by_the_book();          // 6
CheckResult check_der_scorer();           // 9

/// Fast checks 1-6 and 9, in id order.
std::vector<CheckResult> run_fast_checks();

/// Default experiment (synthetic corpus, four systems) for each seed.
std::vector<ExperimentResult> run_seeded_experiments(const std::vector<std::uint64_t>& seeds, int jobs = 1,
                                                     const std::function<void(const std::string&)>& progress = {});

/// 7: seed-averaged tuned eval DER ordering. `seconds` is the experiment wall time.
CheckResult check_system_ordering(const std::vector<ExperimentResult>& runs, double seconds);
/// 8: tuned sigma moves toward 0 and the tuned scale toward 1 after training.
CheckResult check_calibration_drift(const std::vector<ExperimentResult>& runs);

/// "PASS 3 uncertainty limits (0.01 s): detail".
std::string format_check(const CheckResult& r);

}  // namespace pdiar
