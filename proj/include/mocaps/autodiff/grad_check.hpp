#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mocaps/autodiff/tape.hpp"

namespace mocaps::autodiff {

// Builds a scalar from the given leaves; called once recording for the
// analytic pass and many times paused for the finite-difference probes.
using ScalarFn =
    std::function<Value(Tape& tape, const std::vector<Value>& inputs)>;

struct GradCheckCoord {
  size_t input;
  int64_t index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  double max_rel_err = 0;
  bool passed = false;
  std::vector<GradCheckCoord> failures;  // coordinates above tolerance
  std::vector<std::string> warnings;     // suspected kinks / unstable FD
  int64_t coords_checked = 0;
  std::string summary() const;
};

// Compares tape gradients of f against central differences at every
// coordinate of every input (f64 only). Each coordinate is probed at step h
// and h/2; when the two probes disagree strongly the coordinate is flagged
// as a suspected nondifferentiable point instead of silently failing.
// Relative error uses denominator max(|analytic|, |numeric|, floor); the
// floor keeps noise-level gradients from being judged relatively.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           double tolerance = 1e-4, double step = 1e-6,
                           double floor = 1e-4, int64_t max_coords_per_input = 0);

}  // namespace mocaps::autodiff
