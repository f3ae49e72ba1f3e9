#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "phyformer/autodiff.hpp"

namespace phyformer {

struct GradCheckOptions {
  double tolerance = 1e-6;
  double delta = 1e-5;
  // Minimum number of coordinates compared; all of them when the model is smaller.
  std::size_t n_coords = 64;
  // Relative errors use max(|autodiff|, |numeric|, abs_floor) as denominator.
  double abs_floor = 1e-4;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t n_checked = 0;
  bool pass = false;
};

// Builds the scalar loss on a fresh tape from the given parameter leaves.
using LossClosure = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

// Compares autodiff gradients with central finite differences on a random
// subsample of parameter coordinates. `params` is perturbed in place and
// restored before returning.
GradCheckReport grad_check(const LossClosure& loss, std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace phyformer
