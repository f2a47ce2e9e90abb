#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dhicm/tensor.hpp"

namespace dhicm {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_param;
  bool pass = false;
};

// Compares analytic gradients against central finite differences.
//
// `loss_fn` rebuilds the forward computation from the current parameter
// values and returns the scalar loss; it must be deterministic (stochastic
// ops need a fixed seed). The analytic pass runs once under a tape; the
// numeric pass evaluates loss_fn twice per parameter element with no tape.
GradCheckReport check_gradients(const std::string& name,
                                const std::function<Tensor()>& loss_fn,
                                const std::vector<std::pair<std::string, Tensor>>& params,
                                double h = 1e-5, double tol = 1e-4);

// Relative error with a floored denominator.
double rel_err(double a, double b, double floor = 1e-8);

// Finite-difference suite over every primitive op plus a full model with all
// three default second-level-attention sites. Returns per-check reports;
// `all_pass` is the conjunction.
struct GradCheckSuiteResult {
  std::vector<GradCheckReport> reports;
  bool all_pass = true;
};
GradCheckSuiteResult run_gradcheck_suite(std::uint64_t seed);

}  // namespace dhicm
