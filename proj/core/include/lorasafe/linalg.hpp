// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string_view>
#include <vector>

#include "lorasafe/error.hpp"
#include "lorasafe/matrix.hpp"

namespace lorasafe {

namespace detail {

template <typename X, typename Y>
void require_same_shape(const BasicMatrix<X>& x, const BasicMatrix<Y>& y, std::string_view op) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + x.shape() + " vs " + y.shape());
  }
}

}  // namespace detail

/// X * Y with every output element accumulated in float64.
template <typename X, typename Y>
MatrixD multiply(const BasicMatrix<X>& x, const BasicMatrix<Y>& y) {
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + x.shape() + " x " + y.shape());
  }
  const std::size_t n = y.cols();
  MatrixD out(x.rows(), n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* acc = out.row(i).data();
    auto xi = x.row(i);
    for (std::size_t k = 0; k < xi.size(); ++k) {
      const double a = static_cast<double>(xi[k]);
      if (a == 0.0) continue;
      const Y* yk = y.row(k).data();
      for (std::size_t j = 0; j < n; ++j) acc[j] += a * static_cast<double>(yk[j]);
    }
  }
  return out;
}

/// X^T * Y without forming X^T. Streams X row by row, so a tall X is read once
/// sequentially and the accumulator is only x.cols() x y.cols().
template <typename X, typename Y>
MatrixD multiply_tn(const BasicMatrix<X>& x, const BasicMatrix<Y>& y) {
  if (x.rows() != y.rows()) {
    throw DimensionError("matmul_tn: row counts differ " + x.shape() + " vs " + y.shape());
  }
  const std::size_t n = y.cols();
  MatrixD out(x.cols(), n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    const Y* yi = y.row(i).data();
    for (std::size_t j = 0; j < xi.size(); ++j) {
      const double a = static_cast<double>(xi[j]);
      if (a == 0.0) continue;
      double* acc = out.row(j).data();
      for (std::size_t c = 0; c < n; ++c) acc[c] += a * static_cast<double>(yi[c]);
    }
  }
  return out;
}

/// X * Y^T.
template <typename X, typename Y>
MatrixD multiply_nt(const BasicMatrix<X>& x, const BasicMatrix<Y>& y) {
  if (x.cols() != y.cols()) {
    throw DimensionError("matmul_nt: column counts differ " + x.shape() + " vs " + y.shape());
  }
  MatrixD out(x.rows(), y.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    for (std::size_t j = 0; j < y.rows(); ++j) {
      auto yj = y.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < xi.size(); ++k) {
        acc += static_cast<double>(xi[k]) * static_cast<double>(yj[k]);
      }
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul(const Matrix& x, const Matrix& y);

template <typename T>
double frobenius_inner(const BasicMatrix<T>& x, const BasicMatrix<T>& y) {
  detail::require_same_shape(x, y, "frobenius_inner");
  auto a = x.values();
  auto b = y.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

template <typename T>
double frobenius_norm(const BasicMatrix<T>& x) {
  return std::sqrt(frobenius_inner(x, x));
}

/// trace(X * Y) for square X, Y of equal size. With both arguments symmetric
/// this is the elementwise sum of X o Y.
double trace_of_product(const MatrixD& x, const MatrixD& y);

/// ||scale * B * A||_F evaluated through the k x k Gram matrices.
double frobenius_norm(const LowRankFactors& f);

/// scale * B * A.
Matrix densify(const LowRankFactors& f);

/// Throws NumericError naming `what` if any element is NaN or infinite.
template <typename T>
void require_finite(const BasicMatrix<T>& m, std::string_view what) {
  for (T v : m.values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + std::string(what));
  }
}

struct ThinQr {
  MatrixD q;  // m x p, orthonormal columns, p = min(m, n)
  MatrixD r;  // p x n, upper trapezoidal
};

/// Householder QR.
ThinQr thin_qr(const MatrixD& a);

struct SvdResult {
  MatrixD u;                    // m x p
  std::vector<double> singular;  // p values, descending
  MatrixD v;                    // n x p
};

/// One-sided Jacobi SVD, p = min(m, n). Accurate for the small cores the
/// factored routines produce; cost grows as O(m n^2) per sweep.
SvdResult jacobi_svd(const MatrixD& a);

struct TruncatedSvd {
  LowRankFactors factors;
  double reconstruction_error = 0.0;
  std::vector<double> singular_values;  // core spectrum; empty when returned unchanged
};

/// Best rank-`target_rank` approximation of densify(f) computed without
/// leaving factored space: QR of B and A^T, SVD of the small core, truncate.
/// Returned factors carry sqrt(sigma) on each side and unit scale. A target
/// rank >= rank(f) returns f unchanged with zero error.
TruncatedSvd truncated_svd_of_factors(const LowRankFactors& f, std::size_t target_rank);

}  // namespace lorasafe
