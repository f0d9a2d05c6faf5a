// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "nilmformer/autograd.hpp"

namespace nilm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are created on the first step and
// follow the order of the parameter list, which must stay the same across
// calls.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Parameter* const> params);

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Multiplies the learning rate by `factor` once `patience` consecutive
// observations fail to improve on the best value seen.
class ReduceLROnPlateau {
 public:
  ReduceLROnPlateau(std::size_t patience = 5, double factor = 0.5) : patience_(patience), factor_(factor) {}

  // Returns true when the learning rate was reduced.
  bool observe(double metric, Adam& opt);

  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_epochs_; }
  double factor() const { return factor_; }

 private:
  std::size_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

// Everything the training loop mutates besides the parameters themselves.
struct OptimizerState {
  Adam adam;
  ReduceLROnPlateau scheduler;
};

}  // namespace nilm
