// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "nilmformer/error.hpp"

namespace nilm {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(numel(shape_), fill) {
  NILM_EXPECT(std::all_of(shape_.begin(), shape_.end(), [](auto e) { return e > 0; }),
              "tensor extents must be positive: " + to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  NILM_EXPECT(std::all_of(shape_.begin(), shape_.end(), [](auto e) { return e > 0; }),
              "tensor extents must be positive: " + to_string(shape_));
  NILM_EXPECT(values_.size() == numel(shape_), "value count does not match shape " + to_string(shape_));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  NILM_EXPECT(index.size() == shape_.size(), "index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    NILM_EXPECT(i < shape_[axis], "index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  NILM_EXPECT(numel(shape) == values_.size(),
              "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace nilm
