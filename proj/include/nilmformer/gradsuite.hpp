// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference checks over every differentiable building block, grouped
// by tier: primitives, TimeRPE projection, attention layer, embedding block
// and a small end-to-end model.

#include <cstdint>
#include <string>
#include <vector>

namespace nilm {

struct GradSuiteEntry {
  std::string tier;  // primitive | timerpe | dmsa | embedding | model
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param[index]"

  bool passed() const { return checked > 0 && max_rel_error <= tolerance; }
};

// Tolerances: primitives and TimeRPE 1e-6, attention layer and embedding
// 1e-4, model 1e-3.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 7);

}  // namespace nilm
