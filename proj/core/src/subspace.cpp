// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"

namespace lorasafe {

namespace {

// Relative size of ||V^T delta|| below which a delta counts as orthogonal to
// the subspace. Planted-orthogonal inputs produce an exact zero.
constexpr double kOrthogonalTolerance = 1e-12;

}  // namespace

std::string_view to_string(DegenerateReason reason) {
  switch (reason) {
    case DegenerateReason::kZeroDelta: return "zero-delta";
    case DegenerateReason::kOrthogonalDelta: return "orthogonal-delta";
    case DegenerateReason::kZeroSubspace: return "zero-subspace";
  }
  return "?";
}

std::optional<DegenerateReason> parse_degenerate_reason(std::string_view s) {
  if (s == "zero-delta") return DegenerateReason::kZeroDelta;
  if (s == "orthogonal-delta") return DegenerateReason::kOrthogonalDelta;
  if (s == "zero-subspace") return DegenerateReason::kZeroSubspace;
  return std::nullopt;
}

SubspaceOperator::SubspaceOperator(std::string key, Matrix v) : key_(std::move(key)), v_(std::move(v)) {
  require_finite(v_, "alignment matrix of " + key_);
  v_norm_ = frobenius_norm(v_);
}

SubspaceOperator alignment_matrix(std::string key, const Matrix& aligned, const Matrix& unaligned) {
  if (!aligned.same_shape(unaligned)) {
    throw PairingError("layer " + key + ": aligned " + aligned.shape() + " vs unaligned " +
                       unaligned.shape());
  }
  Matrix v(aligned.rows(), aligned.cols());
  auto a = aligned.values();
  auto u = unaligned.values();
  auto out = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - u[i];
  return SubspaceOperator(std::move(key), std::move(v));
}

void SubspaceOperator::require_compatible(const LowRankFactors& f) const {
  f.validate();
  if (f.out_dim() != out_dim() || f.in_dim() != in_dim()) {
    throw DimensionError("layer " + key_ + ": update shape " +
                         Matrix::shape_string(f.out_dim(), f.in_dim()) +
                         " does not match alignment matrix " + v_.shape());
  }
}

MatrixD SubspaceOperator::apply_to_columns(const Matrix& b) const {
  if (v_norm_ == 0.0) throw DegenerateSubspaceError("layer " + key_ + ": alignment matrix is zero");
  const MatrixD vtb = multiply_tn(v_, b);  // d_in x k
  MatrixD out = multiply(v_, vtb);         // d_out x k
  for (double& x : out.values()) x /= v_norm_;
  return out;
}

LowRankFactors SubspaceOperator::apply(const LowRankFactors& f) const {
  require_compatible(f);
  const MatrixD cb = apply_to_columns(f.B);
  return LowRankFactors{matrix_cast<float>(cb), f.A, f.scale};
}

LayerScore SubspaceOperator::cosine_score(const LowRankFactors& f) const {
  require_compatible(f);
  LayerScore score;
  score.key = key_;

  // ||delta||^2 = s^2 tr((B^T B)(A A^T))
  const MatrixD gram_a = multiply_nt(f.A, f.A);
  const double s2 = f.scale * f.scale;
  const double delta_sq = s2 * trace_of_product(multiply_tn(f.B, f.B), gram_a);
  if (!std::isfinite(delta_sq)) throw NumericError("layer " + key_ + ": non-finite update norm");
  if (delta_sq <= 0.0) {
    score.rho = 1.0;
    score.degenerate = DegenerateReason::kZeroDelta;
    return score;
  }
  if (v_norm_ == 0.0) {
    score.rho = 0.0;
    score.degenerate = DegenerateReason::kZeroSubspace;
    return score;
  }

  // <delta, C delta> = ||V^T delta||^2 / ||V||, V^T delta = s (V^T B) A
  const MatrixD vtb = multiply_tn(v_, f.B);
  const double proj_sq = s2 * trace_of_product(multiply_tn(vtb, vtb), gram_a);
  const double delta_norm = std::sqrt(delta_sq);
  if (!std::isfinite(proj_sq)) throw NumericError("layer " + key_ + ": non-finite projection");
  if (proj_sq <= 0.0 || std::sqrt(proj_sq) <= kOrthogonalTolerance * v_norm_ * delta_norm) {
    score.rho = 0.0;
    score.degenerate = DegenerateReason::kOrthogonalDelta;
    return score;
  }

  // ||C delta|| = ||V (V^T B) A|| s / ||V||; the ||V|| factors cancel in rho.
  const MatrixD vvtb = multiply(v_, vtb);
  const double image_sq = s2 * trace_of_product(multiply_tn(vvtb, vvtb), gram_a);
  if (!std::isfinite(image_sq) || image_sq <= 0.0) {
    throw NumericError("layer " + key_ + ": degenerate projected norm");
  }
  const double rho = proj_sq / (delta_norm * std::sqrt(image_sq));
  if (!std::isfinite(rho)) throw NumericError("layer " + key_ + ": non-finite cosine");
  score.rho = std::clamp(rho, 0.0, 1.0);
  return score;
}

}  // namespace lorasafe
