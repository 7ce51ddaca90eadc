// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "lorasafe/matrix.hpp"

namespace lorasafe {

enum class DegenerateReason { kZeroDelta, kOrthogonalDelta, kZeroSubspace };

std::string_view to_string(DegenerateReason reason);
std::optional<DegenerateReason> parse_degenerate_reason(std::string_view s);

struct LayerScore {
  std::string key;
  double rho = 0.0;  // in [0, 1]
  std::optional<DegenerateReason> degenerate;
};

/// Per-layer alignment operator C = V V^T / ||V||_F with V = W_aligned -
/// W_unaligned. C is never formed: every product goes through V^T first, so
/// no d_out x d_out buffer exists at any point.
class SubspaceOperator {
 public:
  SubspaceOperator(std::string key, Matrix v);

  const std::string& key() const noexcept { return key_; }
  const Matrix& v() const noexcept { return v_; }
  double v_norm() const noexcept { return v_norm_; }
  std::size_t out_dim() const noexcept { return v_.rows(); }
  std::size_t in_dim() const noexcept { return v_.cols(); }

  /// C * B for a d_out x k block, accumulated in float64.
  MatrixD apply_to_columns(const Matrix& b) const;

  /// Factored C * delta: (C * B, A, scale). Throws DegenerateSubspaceError
  /// when V is zero.
  LowRankFactors apply(const LowRankFactors& f) const;

  /// Cosine between delta and C * delta under the Frobenius inner product.
  /// Degenerate layers get conventional values: zero delta -> 1, zero V -> 0,
  /// V^T delta = 0 -> 0, each tagged.
  LayerScore cosine_score(const LowRankFactors& f) const;

 private:
  void require_compatible(const LowRankFactors& f) const;

  std::string key_;
  Matrix v_;
  double v_norm_ = 0.0;
};

/// V = W_aligned - W_unaligned. Throws PairingError on a shape mismatch.
SubspaceOperator alignment_matrix(std::string key, const Matrix& aligned, const Matrix& unaligned);

inline LowRankFactors apply_C(const SubspaceOperator& op, const LowRankFactors& f) { return op.apply(f); }

inline LayerScore cosine_score(const SubspaceOperator& op, const LowRankFactors& f) {
  return op.cosine_score(f);
}

}  // namespace lorasafe
