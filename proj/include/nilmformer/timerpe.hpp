// SPDX-License-Identifier: Apache-2.0
#pragma once

// Timestamp-related positional encoding.
//
// Each grid timestamp is decomposed into (minute, hour, day-of-week, month).
// Every covariate t^j is mapped to sin(2*pi*t^j/p^j) and cos(2*pi*t^j/p^j)
// with periods p = (59, 23, 6, 11), the largest value each covariate takes.
// A kernel-size-1 convolution then projects the 8 basis rows to the PE width.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "nilmformer/layers.hpp"
#include "nilmformer/timeutil.hpp"

namespace nilm {

enum class Covariate : std::size_t { minute = 0, hour = 1, weekday = 2, month = 3 };

inline constexpr std::array<int, 4> kCovariatePeriod{59, 23, 6, 11};
inline constexpr std::size_t kBasisRows = 8;

// 4 x n integer matrix, rows (minute, hour, weekday, month).
class CovariateWindow {
 public:
  CovariateWindow() = default;
  explicit CovariateWindow(std::size_t length) : length_(length), values_(4 * length, 0) {}

  std::size_t length() const { return length_; }
  int& at(Covariate row, std::size_t i) { return values_[static_cast<std::size_t>(row) * length_ + i]; }
  int at(Covariate row, std::size_t i) const { return values_[static_cast<std::size_t>(row) * length_ + i]; }
  std::span<const int> values() const { return values_; }

  // Contract violation if any covariate lies outside [0, period].
  void validate() const;

  friend bool operator==(const CovariateWindow&, const CovariateWindow&) = default;

 private:
  std::size_t length_ = 0;
  std::vector<int> values_;
};

CovariateWindow covariates_for_grid(Instant start, Seconds delta_t, std::size_t length);

// [8 x n], rows (sin_m, cos_m, sin_h, cos_h, sin_d, cos_d, sin_M, cos_M).
Tensor sinusoidal_basis(const CovariateWindow& cov);

// Stacks the basis of each window: [B x 8 x n].
Tensor sinusoidal_basis(std::span<const CovariateWindow> batch);

class TimeRPE {
 public:
  TimeRPE() = default;
  TimeRPE(ParameterStore& store, const std::string& name, std::size_t width, std::mt19937_64& rng);

  // basis [B x 8 x n] -> PE [B x width x n]
  Var operator()(Tape& tape, Var basis) const { return proj_(tape, basis); }

  const Conv1d& projection() const { return proj_; }
  std::size_t width() const { return width_; }

 private:
  Conv1d proj_;
  std::size_t width_ = 0;
};

}  // namespace nilm
