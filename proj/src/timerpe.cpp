// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/timerpe.hpp"

#include <cmath>
#include <numbers>

#include "nilmformer/error.hpp"

namespace nilm {

void CovariateWindow::validate() const {
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < length_; ++i) {
      const int v = values_[r * length_ + i];
      NILM_EXPECT(v >= 0 && v <= kCovariatePeriod[r], "covariate out of range at row " + std::to_string(r) +
                                                          ", position " + std::to_string(i) + ": " +
                                                          std::to_string(v));
    }
}

CovariateWindow covariates_for_grid(Instant start, Seconds delta_t, std::size_t length) {
  CovariateWindow cov(length);
  for (std::size_t i = 0; i < length; ++i) {
    const auto f = calendar_fields(start + delta_t * static_cast<long>(i));
    cov.at(Covariate::minute, i) = f.minute;
    cov.at(Covariate::hour, i) = f.hour;
    cov.at(Covariate::weekday, i) = f.weekday;
    cov.at(Covariate::month, i) = f.month;
  }
  return cov;
}

namespace {

void fill_basis(const CovariateWindow& cov, double* dst) {
  cov.validate();
  const std::size_t n = cov.length();
  for (std::size_t r = 0; r < 4; ++r) {
    const double period = kCovariatePeriod[r];
    for (std::size_t i = 0; i < n; ++i) {
      const double angle = 2.0 * std::numbers::pi * cov.at(static_cast<Covariate>(r), i) / period;
      dst[(2 * r) * n + i] = std::sin(angle);
      dst[(2 * r + 1) * n + i] = std::cos(angle);
    }
  }
}

}  // namespace

Tensor sinusoidal_basis(const CovariateWindow& cov) {
  NILM_EXPECT(cov.length() > 0, "empty covariate window");
  Tensor out({kBasisRows, cov.length()});
  fill_basis(cov, out.data());
  return out;
}

Tensor sinusoidal_basis(std::span<const CovariateWindow> batch) {
  NILM_EXPECT(!batch.empty() && batch[0].length() > 0, "empty covariate batch");
  const std::size_t n = batch[0].length();
  Tensor out({batch.size(), kBasisRows, n});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    NILM_EXPECT(batch[b].length() == n, "covariate windows differ in length");
    fill_basis(batch[b], out.data() + b * kBasisRows * n);
  }
  return out;
}

TimeRPE::TimeRPE(ParameterStore& store, const std::string& name, std::size_t width, std::mt19937_64& rng)
    : proj_(store, name, kBasisRows, width, 1, 1, rng), width_(width) {}

}  // namespace nilm
