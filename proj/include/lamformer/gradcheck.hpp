#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lamformer/tensor.hpp"

namespace lam::gradcheck {

// Builds the forward graph from the current parameter values and returns a
// scalar loss. Called once under a tape for analytic gradients and many times
// tape-free for the finite-difference probes.
using LossFn = std::function<Tensor()>;

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
  int excluded = 0;
  bool pass = false;
};

// Central finite differences, step h, against the tape gradient. Samples
// `samples` parameter elements round-robin across `params`; elements where
// |analytic| + |numeric| < 1e-6 are excluded from the comparison.
CheckResult check(const std::string& name, std::vector<Tensor> params, const LossFn& fn,
                  int samples, std::uint64_t seed, double h = 1e-3, double tol = 1e-2);

// The full battery: every differentiable op plus the composite blocks and the
// whole-network loss. Used by the acceptance suite and the CLI.
std::vector<CheckResult> run_all(std::uint64_t seed);

}  // namespace lam::gradcheck
