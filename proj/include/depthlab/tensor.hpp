// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <limits>
#include <optional>
#include <string>

#include "depthlab/errors.hpp"

namespace depthlab {

using Index = Eigen::Index;

/// Dense row-major matrix. Every value in the library is carried by one of
/// these; vectors are stored as 1 x n rows, scalars as 1 x 1.
template <typename Scalar>
using TensorT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor = TensorT<double>;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Reference matrix product. For every output entry the inner sum runs over
/// k in ascending order starting from zero, so the result is bitwise equal to
/// the textbook triple loop. The i-k-j loop order keeps the innermost loop
/// contiguous and vectorizable without changing that order.
template <typename Scalar>
TensorT<Scalar> matmul(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a) + " x " + shape_string(b));
  }
  const Index m = a.rows();
  const Index k = a.cols();
  const Index n = b.cols();
  TensorT<Scalar> c = TensorT<Scalar>::Zero(m, n);
  for (Index i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    const Scalar* arow = a.data() + i * k;
    for (Index p = 0; p < k; ++p) {
      const Scalar aip = arow[p];
      const Scalar* brow = b.data() + p * n;
      for (Index j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

/// a * b^T without materializing the transpose in the caller.
template <typename Scalar>
TensorT<Scalar> matmul_nt(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  const TensorT<Scalar> bt = b.transpose();
  return matmul(a, bt);
}

/// a^T * b.
template <typename Scalar>
TensorT<Scalar> matmul_tn(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  const TensorT<Scalar> at = a.transpose();
  return matmul(at, b);
}

/// Row-wise softmax with per-row max subtraction. Masked entries (mask false)
/// are excluded and come out as exactly zero.
template <typename Scalar>
TensorT<Scalar> softmax_rows(const TensorT<Scalar>& x, const Mask* mask = nullptr) {
  if (mask != nullptr && (mask->rows() != x.rows() || mask->cols() != x.cols())) {
    throw DimensionError("softmax_rows: mask shape " + shape_string(mask->rows(), mask->cols()) +
                         " does not match " + shape_string(x));
  }
  TensorT<Scalar> y = TensorT<Scalar>::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Index j = 0; j < x.cols(); ++j) {
      if (mask != nullptr && !(*mask)(i, j)) continue;
      any = true;
      mx = std::max(mx, x(i, j));
    }
    if (!any) throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    Scalar sum = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      if (mask != nullptr && !(*mask)(i, j)) continue;
      const Scalar e = std::exp(x(i, j) - mx);
      y(i, j) = e;
      sum += e;
    }
    for (Index j = 0; j < x.cols(); ++j) y(i, j) /= sum;
  }
  return y;
}

/// Lower-triangular (causal) mask of size n x n.
inline Mask causal_mask(Index n) {
  Mask m(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) m(i, j) = j <= i;
  return m;
}

inline bool all_finite(const Tensor& t) { return t.allFinite(); }

/// Bitwise equality, distinguishing -0.0 from 0.0 and treating NaN payloads
/// as bits.
template <typename Scalar>
bool bitwise_equal(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace depthlab
