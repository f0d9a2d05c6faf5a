// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nilmformer/error.hpp"

namespace nilm {

GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params, double h,
                           std::size_t max_per_param, double floor_scale) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  std::vector<Tensor> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  for (auto* p : params) p->zero_grad();
  double largest = 0.0;
  for (const auto& g : analytic)
    for (double v : g.values()) largest = std::max(largest, std::abs(v));
  const double floor = std::max(1e-8, floor_scale * largest);

  auto evaluate = [&] {
    Tape tape;
    return loss(tape).value()[0];
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    const std::size_t n = p.value.size();
    const std::size_t stride = (max_per_param == 0 || n <= max_per_param) ? 1 : (n + max_per_param - 1) / max_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = evaluate();
      p.value[i] = saved - h;
      const double down = evaluate();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_parameter = p.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace nilm
