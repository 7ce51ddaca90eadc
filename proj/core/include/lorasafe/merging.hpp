// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "lorasafe/adapter.hpp"
#include "lorasafe/matrix.hpp"
#include "lorasafe/subspace.hpp"

namespace lorasafe {

enum class Strategy { kLinear, kDareLinear, kTies };

std::string_view to_string(Strategy s);
/// Accepts "linear", "dare_linear" (or "dare-linear", "dare") and "ties".
std::optional<Strategy> parse_strategy(std::string_view s);

/// How a merged delta is turned back into LoRA factors.
///  - concat: exact [B_f | B_s], [A_f ; A_s] stacking, rank r_f + r_s
///  - restore: truncated SVD to target_rank, reconstruction error reported
///  - dense: exact full-rank factorization of the dense sum, rank min(d_out, d_in)
struct RankMode {
  enum class Kind { kConcat, kRestore, kDense };
  Kind kind = Kind::kConcat;
  std::size_t target_rank = 0;

  static RankMode concat() { return {Kind::kConcat, 0}; }
  static RankMode dense() { return {Kind::kDense, 0}; }
  static RankMode restore(std::size_t rank) { return {Kind::kRestore, rank}; }

  friend bool operator==(const RankMode&, const RankMode&) = default;
};

std::string to_string(const RankMode& mode);

/// Concat for linear merging, dense otherwise: masking and trimming destroy
/// the low-rank structure that concat relies on.
RankMode default_rank_mode(Strategy s);

struct MergePolicy {
  Strategy strategy = Strategy::kLinear;
  double w_f = 0.8;
  double w_s = 0.2;
  double density = 1.0;
  std::uint64_t seed = 0;
  double tau = 0.5;
  RankMode rank_mode = RankMode::concat();

  /// Throws PolicyError on out-of-range fields and ModeError when concat is
  /// combined with a non-linear strategy.
  void validate() const;
};

struct MergeOutcome {
  LoraLayer layer;
  double reconstruction_error = 0.0;
};

/// w_f * delta_f + w_s * delta_s. Output key is f.key.
MergeOutcome merge_linear(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s,
                          const RankMode& mode);

/// Drop-and-rescale: each element kept with probability `density` and scaled
/// by 1/density. The mask is a pure function of (seed, key, tag, element index).
Matrix dare_drop_rescale(const Matrix& delta, double density, std::uint64_t seed, std::string_view key,
                         std::string_view tag);

/// w_f * D(delta_f) + w_s * D(delta_s) with independent masks tagged "fine_tuned"
/// and "safe".
MergeOutcome merge_dare_linear(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s,
                               double density, std::uint64_t seed, const RankMode& mode);

/// Keeps the ceil(density * N) largest-magnitude entries, ties resolved in
/// favour of the lower flat index; everything else is zeroed.
Matrix ties_trim(const Matrix& t, double density);

/// Trim, elect sign of the trimmed sum (zero counts as positive), then average
/// the nonzero trimmed values that agree with the elected sign.
Matrix ties_combine(const Matrix& t_f, const Matrix& t_s, double density);

/// TIES on T_f = w_f * delta_f and T_s = w_s * delta_s.
MergeOutcome merge_ties(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s, double density,
                        const RankMode& mode);

/// Dispatches on policy.strategy.
MergeOutcome merge_layers(const LoraLayer& f, const LoraLayer& s, const MergePolicy& policy);

/// Replaces B by C * B; C * (B A) = (C B) A so A needs no projection.
LoraLayer safelora_project(const LoraLayer& f, const SubspaceOperator& op);

enum class NegatedFactor { kB, kA };

LoraLayer negate_factor(const LoraLayer& layer, NegatedFactor which);

struct DareOptions {
  double density = 1.0;
  std::uint64_t seed = 0;
};

/// delta_sft + alpha * negate(delta_harm). Without DARE the result is exact
/// (concat factors unless `mode` says otherwise); with DARE the negated
/// harmful delta is masked first and the result uses dense or restore.
MergeOutcome resta_merge(const LoraLayer& sft, const LoraLayer& harmful, double alpha,
                         const std::optional<DareOptions>& dare, const RankMode& mode,
                         NegatedFactor negated = NegatedFactor::kB);

/// Converts a dense delta into a layer per `mode` (dense or restore).
MergeOutcome layer_from_dense(const std::string& key, const Matrix& delta, const RankMode& mode);

}  // namespace lorasafe
