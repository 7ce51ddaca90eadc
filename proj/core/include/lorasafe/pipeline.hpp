// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lorasafe/adapter.hpp"
#include "lorasafe/merging.hpp"
#include "lorasafe/report.hpp"
#include "lorasafe/subspace.hpp"
#include "lorasafe/weights.hpp"

namespace lorasafe {

struct PipelineOptions {
  NamingProfile profile;
  std::size_t workers = 1;
};

struct ScoringStats {
  std::size_t rho_computations = 0;
};

/// rho for every layer of `fine_tuned`, in bundle order. Fails with
/// MissingKeyError listing every weight tensor absent from either source.
std::vector<LayerScore> score_layers(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                                     const WeightSource& unaligned, const PipelineOptions& options,
                                     ScoringStats* stats = nullptr);

struct PipelineResult {
  AdapterBundle adapter;
  MergeReport report;
};

/// Scores without merging; decisions carry rho and the flag at `tau`.
MergeReport run_analyze(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                        const WeightSource& unaligned, double tau, const PipelineOptions& options);

/// Selective merge: layers with rho < tau are merged with the safe adapter's
/// layer under `policy`; all other layers are copied unchanged.
PipelineResult run_safemerge(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                             const WeightSource& aligned, const WeightSource& unaligned,
                             const MergePolicy& policy, const PipelineOptions& options);

/// Same as run_safemerge with precomputed scores (one per fine-tuned layer, in
/// bundle order).
PipelineResult run_safemerge_scored(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                                    const std::vector<LayerScore>& scores, const MergePolicy& policy,
                                    const PipelineOptions& options);

/// Layers with rho < tau are replaced by their projection C * delta.
PipelineResult run_safelora(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                            const WeightSource& unaligned, double tau, const PipelineOptions& options);

struct RestaOptions {
  double alpha = 0.5;
  std::optional<DareOptions> dare;
  std::optional<RankMode> rank_mode;  // concat without DARE, dense with DARE
  NegatedFactor negated = NegatedFactor::kB;
};

/// Adds the negated harmful adapter to every layer. Both bundles must hold the
/// same keys.
PipelineResult run_resta(const AdapterBundle& sft, const AdapterBundle& harmful, const RestaOptions& resta,
                         const PipelineOptions& options);

struct EvalScores {
  double direct_harm = 0.0;  // percent
  double hexphi = 0.0;       // percent
};

/// Mean of the two harmlessness rates, ((100 - d) + (100 - h)) / 2.
double safety_score(const EvalScores& e);

struct SweepGrid {
  std::vector<double> taus;
  std::vector<std::pair<double, double>> weights;
  std::vector<Strategy> strategies{Strategy::kLinear};
  std::vector<double> densities{1.0};
  std::uint64_t seed = 0;
  std::optional<RankMode> rank_mode;  // default_rank_mode(strategy) when unset
};

struct SweepRow {
  double tau = 0.0;
  Strategy strategy = Strategy::kLinear;
  double w_f = 0.0;
  double w_s = 0.0;
  std::optional<double> density;  // unset for linear
  RankMode rank_mode;
  std::size_t total_count = 0;
  std::size_t flagged_count = 0;
  std::size_t merged_count = 0;
  double mean_rho = 0.0;
  double mean_rho_merged = 0.0;
  double mean_reconstruction_error = 0.0;
  double max_reconstruction_error = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  ScoringStats stats;

  std::string to_csv() const;
};

/// Every grid point reuses one set of scores; merges are computed once per
/// non-threshold setting.
SweepResult sweep(const AdapterBundle& fine_tuned, const AdapterBundle& safe, const WeightSource& aligned,
                  const WeightSource& unaligned, const SweepGrid& grid, const PipelineOptions& options);

/// Same, from precomputed scores.
SweepResult sweep_scored(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                         const std::vector<LayerScore>& scores, const SweepGrid& grid,
                         const PipelineOptions& options);

/// Policy fields in stable order, for reports.
nlohmann::ordered_json policy_json(const MergePolicy& policy);

}  // namespace lorasafe
