// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/optim.hpp"

#include <cmath>

#include "nilmformer/error.hpp"

namespace nilm {

void Adam::step(std::span<Parameter* const> params) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  NILM_EXPECT(m_.size() == params.size(), "Adam: parameter list changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    NILM_EXPECT(p.value.shape() == m_[k].shape(), "Adam: parameter shape changed between steps");
    double* m = m_[k].data();
    double* v = v_[k].data();
    double* w = p.value.data();
    const double* g = p.grad.data();
    for (std::size_t i = 0, n = p.value.size(); i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

bool ReduceLROnPlateau::observe(double metric, Adam& opt) {
  if (metric < best_) {
    best_ = metric;
    bad_epochs_ = 0;
    return false;
  }
  if (++bad_epochs_ < patience_) return false;
  opt.set_lr(opt.lr() * factor_);
  bad_epochs_ = 0;
  return true;
}

}  // namespace nilm
