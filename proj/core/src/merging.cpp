// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/rng.hpp"

namespace lorasafe {

namespace {

void require_weights(double w_f, double w_s) {
  if (!std::isfinite(w_f) || !std::isfinite(w_s) || w_f < 0.0 || w_s < 0.0) {
    throw PolicyError("merge weights must be finite and non-negative, got (" + std::to_string(w_f) +
                      ", " + std::to_string(w_s) + ")");
  }
}

void require_density(double density) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw PolicyError("density must lie in (0, 1], got " + std::to_string(density));
  }
}

void require_pair(const LoraLayer& f, const LoraLayer& s) {
  f.validate();
  s.validate();
  if (f.out_dim() != s.out_dim() || f.in_dim() != s.in_dim()) {
    throw PairingError("layer " + f.key + ": update shapes differ, " +
                       Matrix::shape_string(f.out_dim(), f.in_dim()) + " vs " +
                       Matrix::shape_string(s.out_dim(), s.in_dim()));
  }
}

// Layer whose factors already include every scale: lora_alpha = rank.
LoraLayer unit_scale_layer(const std::string& key, Matrix b, Matrix a) {
  LoraLayer out;
  out.key = key;
  out.lora_alpha = static_cast<double>(a.rows());
  out.B = std::move(b);
  out.A = std::move(a);
  return out;
}

// [c1 B1 | c2 B2], [A1 ; A2]; c already folds in each layer's LoRA scale.
LowRankFactors concat_factors(const LoraLayer& l1, double c1, const LoraLayer& l2, double c2) {
  const std::size_t r1 = l1.rank();
  const std::size_t r2 = l2.rank();
  Matrix b(l1.out_dim(), r1 + r2);
  for (std::size_t i = 0; i < b.rows(); ++i) {
    for (std::size_t k = 0; k < r1; ++k) b(i, k) = static_cast<float>(c1 * l1.B(i, k));
    for (std::size_t k = 0; k < r2; ++k) b(i, r1 + k) = static_cast<float>(c2 * l2.B(i, k));
  }
  Matrix a(r1 + r2, l1.in_dim());
  for (std::size_t k = 0; k < r1; ++k) std::copy(l1.A.row(k).begin(), l1.A.row(k).end(), a.row(k).begin());
  for (std::size_t k = 0; k < r2; ++k) std::copy(l2.A.row(k).begin(), l2.A.row(k).end(), a.row(r1 + k).begin());
  return LowRankFactors{std::move(b), std::move(a), 1.0};
}

MergeOutcome finish_factors(const std::string& key, LowRankFactors f, const RankMode& mode) {
  switch (mode.kind) {
    case RankMode::Kind::kConcat:
      return {unit_scale_layer(key, std::move(f.B), std::move(f.A)), 0.0};
    case RankMode::Kind::kRestore: {
      TruncatedSvd t = truncated_svd_of_factors(f, mode.target_rank);
      if (t.factors.scale != 1.0) {
        for (float& x : t.factors.B.values()) x = static_cast<float>(t.factors.scale * x);
      }
      return {unit_scale_layer(key, std::move(t.factors.B), std::move(t.factors.A)),
              t.reconstruction_error};
    }
    case RankMode::Kind::kDense:
      return layer_from_dense(key, densify(f), mode);
  }
  throw ModeError("unknown rank mode");
}

Matrix weighted_sum(double w1, const Matrix& x1, double w2, const Matrix& x2) {
  Matrix out(x1.rows(), x1.cols());
  auto a = x1.values();
  auto b = x2.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = static_cast<float>(w1 * static_cast<double>(a[i]) + w2 * static_cast<double>(b[i]));
  }
  return out;
}

Matrix scaled(double w, const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  auto a = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(w * static_cast<double>(a[i]));
  return out;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kLinear: return "linear";
    case Strategy::kDareLinear: return "dare_linear";
    case Strategy::kTies: return "ties";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "linear") return Strategy::kLinear;
  if (s == "dare_linear" || s == "dare-linear" || s == "dare") return Strategy::kDareLinear;
  if (s == "ties") return Strategy::kTies;
  return std::nullopt;
}

std::string to_string(const RankMode& mode) {
  switch (mode.kind) {
    case RankMode::Kind::kConcat: return "concat";
    case RankMode::Kind::kDense: return "dense";
    case RankMode::Kind::kRestore: return "restore:" + std::to_string(mode.target_rank);
  }
  return "?";
}

RankMode default_rank_mode(Strategy s) {
  return s == Strategy::kLinear ? RankMode::concat() : RankMode::dense();
}

void MergePolicy::validate() const {
  require_weights(w_f, w_s);
  if (strategy != Strategy::kLinear) require_density(density);
  if (!(tau >= 0.0 && tau <= 1.0)) throw PolicyError("tau must lie in [0, 1], got " + std::to_string(tau));
  if (rank_mode.kind == RankMode::Kind::kRestore && rank_mode.target_rank == 0) {
    throw PolicyError("restore rank mode needs a target rank >= 1");
  }
  if (rank_mode.kind == RankMode::Kind::kConcat && strategy != Strategy::kLinear) {
    throw ModeError(std::string(to_string(strategy)) +
                    " cannot use concat rank mode: element masking destroys the low-rank "
                    "structure, use dense or restore");
  }
}

MergeOutcome layer_from_dense(const std::string& key, const Matrix& delta, const RankMode& mode) {
  if (mode.kind == RankMode::Kind::kConcat) {
    throw ModeError("layer " + key + ": a dense delta has no exact concat factorization");
  }
  const std::size_t d_out = delta.rows();
  const std::size_t d_in = delta.cols();
  LowRankFactors full;
  if (d_in <= d_out) {
    full = LowRankFactors{delta, Matrix::identity(d_in), 1.0};
  } else {
    full = LowRankFactors{Matrix::identity(d_out), delta, 1.0};
  }
  if (mode.kind == RankMode::Kind::kDense) {
    return {unit_scale_layer(key, std::move(full.B), std::move(full.A)), 0.0};
  }
  return finish_factors(key, std::move(full), mode);
}

MergeOutcome merge_linear(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s,
                          const RankMode& mode) {
  require_pair(f, s);
  require_weights(w_f, w_s);
  if (mode.kind == RankMode::Kind::kDense) {
    return layer_from_dense(f.key, weighted_sum(w_f, densify(f.factors()), w_s, densify(s.factors())),
                            mode);
  }
  return finish_factors(f.key, concat_factors(f, w_f * f.scale(), s, w_s * s.scale()), mode);
}

Matrix dare_drop_rescale(const Matrix& delta, double density, std::uint64_t seed, std::string_view key,
                         std::string_view tag) {
  require_density(density);
  const KeyedStream stream(seed, key, tag);
  Matrix out(delta.rows(), delta.cols());
  auto in = delta.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (stream.uniform(i) < density) o[i] = static_cast<float>(static_cast<double>(in[i]) / density);
  }
  return out;
}

MergeOutcome merge_dare_linear(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s,
                               double density, std::uint64_t seed, const RankMode& mode) {
  require_pair(f, s);
  require_weights(w_f, w_s);
  require_density(density);
  if (mode.kind == RankMode::Kind::kConcat) {
    throw ModeError("dare_linear cannot use concat rank mode: element masking destroys the "
                    "low-rank structure, use dense or restore");
  }
  const Matrix masked_f = dare_drop_rescale(densify(f.factors()), density, seed, f.key, "fine_tuned");
  const Matrix masked_s = dare_drop_rescale(densify(s.factors()), density, seed, f.key, "safe");
  return layer_from_dense(f.key, weighted_sum(w_f, masked_f, w_s, masked_s), mode);
}

Matrix ties_trim(const Matrix& t, double density) {
  require_density(density);
  const std::size_t n = t.size();
  const auto want = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-9));
  const std::size_t keep = std::clamp<std::size_t>(want, 1, n);
  auto v = t.values();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(v[a]) > std::abs(v[b]);
  });
  Matrix out(t.rows(), t.cols());
  auto o = out.values();
  for (std::size_t i = 0; i < keep && i < n; ++i) o[order[i]] = v[order[i]];
  return out;
}

Matrix ties_combine(const Matrix& t_f, const Matrix& t_s, double density) {
  if (!t_f.same_shape(t_s)) {
    throw PairingError("ties: shape mismatch " + t_f.shape() + " vs " + t_s.shape());
  }
  const Matrix trimmed_f = ties_trim(t_f, density);
  const Matrix trimmed_s = ties_trim(t_s, density);
  auto a = trimmed_f.values();
  auto b = trimmed_s.values();
  Matrix out(t_f.rows(), t_f.cols());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const bool positive = static_cast<double>(a[i]) + static_cast<double>(b[i]) >= 0.0;
    double sum = 0.0;
    int count = 0;
    for (float x : {a[i], b[i]}) {
      if (x == 0.0f) continue;
      if ((x > 0.0f) == positive) {
        sum += x;
        ++count;
      }
    }
    o[i] = count == 0 ? 0.0f : static_cast<float>(sum / count);
  }
  return out;
}

MergeOutcome merge_ties(const LoraLayer& f, const LoraLayer& s, double w_f, double w_s, double density,
                        const RankMode& mode) {
  require_pair(f, s);
  require_weights(w_f, w_s);
  require_density(density);
  if (mode.kind == RankMode::Kind::kConcat) {
    throw ModeError("ties cannot use concat rank mode: trimming destroys the low-rank structure, "
                    "use dense or restore");
  }
  const Matrix t_f = scaled(w_f, densify(f.factors()));
  const Matrix t_s = scaled(w_s, densify(s.factors()));
  return layer_from_dense(f.key, ties_combine(t_f, t_s, density), mode);
}

MergeOutcome merge_layers(const LoraLayer& f, const LoraLayer& s, const MergePolicy& policy) {
  switch (policy.strategy) {
    case Strategy::kLinear:
      return merge_linear(f, s, policy.w_f, policy.w_s, policy.rank_mode);
    case Strategy::kDareLinear:
      return merge_dare_linear(f, s, policy.w_f, policy.w_s, policy.density, policy.seed,
                               policy.rank_mode);
    case Strategy::kTies:
      return merge_ties(f, s, policy.w_f, policy.w_s, policy.density, policy.rank_mode);
  }
  throw PolicyError("unknown strategy");
}

LoraLayer safelora_project(const LoraLayer& f, const SubspaceOperator& op) {
  f.validate();
  const LowRankFactors projected = op.apply(f.factors());
  LoraLayer out = f;
  out.B = projected.B;
  return out;
}

LoraLayer negate_factor(const LoraLayer& layer, NegatedFactor which) {
  LoraLayer out = layer;
  Matrix& m = which == NegatedFactor::kB ? out.B : out.A;
  for (float& x : m.values()) x = -x;
  return out;
}

MergeOutcome resta_merge(const LoraLayer& sft, const LoraLayer& harmful, double alpha,
                         const std::optional<DareOptions>& dare, const RankMode& mode,
                         NegatedFactor negated) {
  require_pair(sft, harmful);
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw PolicyError("RESTA weight must be positive, got " + std::to_string(alpha));
  }
  const LoraLayer safety_vector = negate_factor(harmful, negated);
  if (!dare) {
    if (mode.kind == RankMode::Kind::kDense) {
      return layer_from_dense(
          sft.key, weighted_sum(1.0, densify(sft.factors()), alpha, densify(safety_vector.factors())),
          mode);
    }
    return finish_factors(sft.key,
                          concat_factors(sft, sft.scale(), safety_vector, alpha * safety_vector.scale()),
                          mode);
  }
  if (mode.kind == RankMode::Kind::kConcat) {
    throw ModeError("RESTA with DARE cannot use concat rank mode, use dense or restore");
  }
  const Matrix masked =
      dare_drop_rescale(densify(safety_vector.factors()), dare->density, dare->seed, sft.key, "harmful");
  return layer_from_dense(sft.key, weighted_sum(1.0, densify(sft.factors()), alpha, masked), mode);
}

}  // namespace lorasafe
