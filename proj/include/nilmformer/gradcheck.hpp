// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "nilmformer/autograd.hpp"

namespace nilm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Builds a scalar loss on the given (fresh) tape.
using LossFn = std::function<Var(Tape&)>;

// Compares backward() against central differences with step h:
//   max |analytic - numeric| / max(|analytic|, |numeric|, floor)
// over every checked element, where floor = max(1e-8, floor_scale * G) and G
// is the largest analytic gradient magnitude over all checked parameters. A
// nonzero floor_scale keeps exactly-zero gradients (e.g. a key bias under
// softmax) from being judged on round-off alone. `max_per_param` > 0 checks
// an evenly strided subset of each parameter. Parameter gradients are left
// zeroed.
GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params, double h = 1e-5,
                           std::size_t max_per_param = 0, double floor_scale = 0.0);

}  // namespace nilm
