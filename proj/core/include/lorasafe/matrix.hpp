// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorasafe/error.hpp"

namespace lorasafe {

/// Dense row-major 2-D array. Storage is float32 for checkpoint payloads
/// (Matrix) and float64 for numerical intermediates (MatrixD).
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows, cols));
    }
  }
  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool same_shape(const BasicMatrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + ", " + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

template <typename To, typename From>
BasicMatrix<To> matrix_cast(const BasicMatrix<From>& m) {
  std::vector<To> out(m.size());
  auto in = m.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<To>(in[i]);
  return BasicMatrix<To>(m.rows(), m.cols(), std::move(out));
}

/// Factored low-rank matrix scale * B * A with B (d_out x k) and A (k x d_in).
struct LowRankFactors {
  Matrix B;
  Matrix A;
  double scale = 1.0;

  std::size_t rank() const noexcept { return A.rows(); }
  std::size_t out_dim() const noexcept { return B.rows(); }
  std::size_t in_dim() const noexcept { return A.cols(); }

  // Throws DimensionError when B.cols != A.rows or the inner rank is zero.
  void validate() const;
};

}  // namespace lorasafe
