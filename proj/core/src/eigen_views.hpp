#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace lightclip::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatView = Eigen::Map<RowMat>;
using ConstMatView = Eigen::Map<const RowMat>;
using StridedView = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedView = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecView = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecView = Eigen::Map<const Eigen::RowVectorXd>;

inline MatView view(double* p, std::size_t rows, std::size_t cols) {
  return MatView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatView view(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// Column block [col0, col0 + cols) of a row-major matrix with `stride` columns.
inline StridedView block_view(double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return StridedView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
inline ConstStridedView block_view(const double* p, std::size_t rows, std::size_t cols,
                                   std::size_t stride) {
  return ConstStridedView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

inline VecView vec(double* p, std::size_t n) { return VecView(p, static_cast<Eigen::Index>(n)); }
inline ConstVecView vec(const double* p, std::size_t n) {
  return ConstVecView(p, static_cast<Eigen::Index>(n));
}

}  // namespace lightclip::detail
