// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include "nilmformer/tensor.hpp"

namespace nilm::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVec = Eigen::Matrix<double, Eigen::Dynamic, 1>;

inline auto mat(double* p, std::size_t r, std::size_t c) {
  return Eigen::Map<RowMat>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline auto cmat(const double* p, std::size_t r, std::size_t c) {
  return Eigen::Map<const RowMat>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
// r x c block with row pitch `stride`.
using Strided = Eigen::OuterStride<Eigen::Dynamic>;
inline auto smat(double* p, std::size_t r, std::size_t c, std::size_t stride) {
  return Eigen::Map<RowMat, 0, Strided>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c),
                                        Strided(static_cast<Eigen::Index>(stride)));
}
inline auto csmat(const double* p, std::size_t r, std::size_t c, std::size_t stride) {
  return Eigen::Map<const RowMat, 0, Strided>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c),
                                              Strided(static_cast<Eigen::Index>(stride)));
}
inline auto mat(Tensor& t, std::size_t r, std::size_t c) { return mat(t.data(), r, c); }
inline auto cmat(const Tensor& t, std::size_t r, std::size_t c) { return cmat(t.data(), r, c); }
inline auto vec(Tensor& t) { return Eigen::Map<ColVec>(t.data(), static_cast<Eigen::Index>(t.size())); }
inline auto cvec(const Tensor& t) {
  return Eigen::Map<const ColVec>(t.data(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace nilm::detail
