#pragma once

// Property suites behind `mast check`.

#include <string>
#include <vector>

namespace mast::checks {

struct CheckResult {
  std::string name;
  double deviation = 0.0;  // worst observed
  double tolerance = 0.0;
  bool passed = false;
};

std::vector<CheckResult> equivariance_suite();
std::vector<CheckResult> gradients_suite();
std::vector<CheckResult> oracles_suite();

}  // namespace mast::checks
