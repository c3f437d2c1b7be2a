#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sarnet/gradcheck.hpp"

namespace sarnet {

struct SuiteEntry {
  std::string module;
  std::string name;
  GradCheckReport report;
  /// Negative controls pass when the check fails.
  bool expect_failure = false;

  bool ok() const { return report.pass != expect_failure; }
};

/// Modules of the finite-difference suite, in run order.
const std::vector<std::string>& grad_suite_modules();

/// Runs one module ("tensor", "dam", "neck", "loss") or "all".
/// `on_entry` sees each result as soon as it is available. Throws ConfigError
/// for an unknown module.
std::vector<SuiteEntry> run_grad_suite(const std::string& module,
                                       const std::function<void(const SuiteEntry&)>& on_entry = {});

}  // namespace sarnet
