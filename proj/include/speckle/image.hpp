#pragma once

#include <Eigen/Dense>

namespace speckle {

/// 2-D grid of linear intensities, row-major so (i, j) = (row, col)
/// maps directly onto raster scan order.
template <class S>
using Image = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;
using ImageD = Image<double>;

template <class S>
bool all_finite(const Image<S>& img) {
  return img.isFinite().all();
}

template <class S>
bool all_non_negative(const Image<S>& img) {
  return (img >= S(0)).all();
}

}  // namespace speckle
