// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/parallel.hpp"

namespace lorasafe {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out;
}

std::vector<const LoraLayer*> ordered_layers(const AdapterBundle& bundle) {
  std::vector<const LoraLayer*> out;
  out.reserve(bundle.layers.size());
  for (const auto& [k, l] : bundle.layers) out.push_back(&l);
  return out;
}

std::optional<std::size_t> population_of(const AdapterBundle& bundle) {
  std::set<std::size_t> indices;
  for (const auto& [k, l] : bundle.layers) {
    auto idx = layer_index(k);
    if (!idx) return std::nullopt;
    indices.insert(*idx);
  }
  if (indices.empty() || bundle.target_modules.empty()) return std::nullopt;
  return expected_layer_population(indices.size(), bundle.target_modules);
}

WeightPairLoader make_loader(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                             const WeightSource& unaligned, const PipelineOptions& options) {
  std::map<std::string, std::string> names;
  for (const auto& [k, l] : fine_tuned.layers) names[k] = options.profile.weight_name(k);
  WeightPairLoader loader(aligned, unaligned, std::move(names));
  std::vector<std::string> bad;
  for (const auto& [k, l] : fine_tuned.layers) {
    const Shape2 s = loader.shape(k);
    if (s.first != l.out_dim() || s.second != l.in_dim()) {
      bad.push_back(k + " adapter " + Matrix::shape_string(l.out_dim(), l.in_dim()) + " vs weights " +
                    Matrix::shape_string(s.first, s.second));
    }
  }
  if (!bad.empty()) throw PairingError("adapter/weight shape mismatch: " + join(bad));
  return loader;
}

LayerDecision scored_decision(const LayerScore& score, const LoraLayer& layer, double tau) {
  LayerDecision d;
  d.key = layer.key;
  d.rho = score.rho;
  d.flagged = score.rho < tau;
  d.degenerate = score.degenerate;
  d.rank_in = layer.rank();
  d.rank_out = layer.rank();
  return d;
}

}  // namespace

ordered_json policy_json(const MergePolicy& policy) {
  ordered_json j;
  j["strategy"] = std::string(to_string(policy.strategy));
  j["w_f"] = policy.w_f;
  j["w_s"] = policy.w_s;
  j["density"] = policy.density;
  j["seed"] = policy.seed;
  j["tau"] = policy.tau;
  j["rank_mode"] = to_string(policy.rank_mode);
  return j;
}

std::vector<LayerScore> score_layers(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                                     const WeightSource& unaligned, const PipelineOptions& options,
                                     ScoringStats* stats) {
  const WeightPairLoader loader = make_loader(fine_tuned, aligned, unaligned, options);
  const auto layers = ordered_layers(fine_tuned);
  std::vector<LayerScore> scores(layers.size());
  parallel_for(layers.size(), options.workers, [&](std::size_t i) {
    const LoraLayer& layer = *layers[i];
    WeightPair pair = loader.load(layer.key);
    const SubspaceOperator op = alignment_matrix(layer.key, pair.aligned, pair.unaligned);
    scores[i] = op.cosine_score(layer.factors());
  });
  if (stats) stats->rho_computations += scores.size();
  return scores;
}

MergeReport run_analyze(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                        const WeightSource& unaligned, double tau, const PipelineOptions& options) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw PolicyError("tau must lie in [0, 1], got " + std::to_string(tau));
  const auto scores = score_layers(fine_tuned, aligned, unaligned, options);
  MergeReport report;
  report.mode = "analyze";
  report.policy["tau"] = tau;
  report.input_digests = {{"fine_tuned", adapter_digest(fine_tuned, options.profile)},
                          {"aligned", aligned.digest()},
                          {"unaligned", unaligned.digest()}};
  const auto layers = ordered_layers(fine_tuned);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    report.decisions.push_back(scored_decision(scores[i], *layers[i], tau));
  }
  report.expected_total = population_of(fine_tuned);
  report.recount();
  return report;
}

PipelineResult run_safemerge_scored(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                                    const std::vector<LayerScore>& scores, const MergePolicy& policy,
                                    const PipelineOptions& options) {
  policy.validate();
  const auto layers = ordered_layers(fine_tuned);
  if (scores.size() != layers.size()) {
    throw ValidationError("expected " + std::to_string(layers.size()) + " scores, got " +
                          std::to_string(scores.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (scores[i].key != layers[i]->key) {
      throw ValidationError("score " + std::to_string(i) + " is for " + scores[i].key + ", expected " +
                            layers[i]->key);
    }
  }

  std::vector<LoraLayer> out_layers(layers.size());
  std::vector<LayerDecision> decisions(layers.size());
  parallel_for(layers.size(), options.workers, [&](std::size_t i) {
    const LoraLayer& layer = *layers[i];
    LayerDecision d = scored_decision(scores[i], layer, policy.tau);
    out_layers[i] = layer;
    if (d.flagged) {
      auto it = safe.layers.find(layer.key);
      if (it == safe.layers.end()) {
        d.notes.push_back("missing-safe-layer");
      } else {
        if (it->second.rank() != layer.rank()) d.notes.push_back("rank-mismatch");
        MergeOutcome m = merge_layers(layer, it->second, policy);
        d.merged = true;
        d.strategy = std::string(to_string(policy.strategy));
        d.w_f = policy.w_f;
        d.w_s = policy.w_s;
        d.rank_out = m.layer.rank();
        d.reconstruction_error = m.reconstruction_error;
        out_layers[i] = std::move(m.layer);
      }
    }
    decisions[i] = std::move(d);
  });

  PipelineResult result;
  result.adapter.target_modules = fine_tuned.target_modules;
  for (auto& l : out_layers) {
    std::string key = l.key;
    result.adapter.layers.emplace(std::move(key), std::move(l));
  }
  MergeReport& report = result.report;
  report.mode = "merge";
  report.policy = policy_json(policy);
  report.input_digests = {{"fine_tuned", adapter_digest(fine_tuned, options.profile)},
                          {"safe", adapter_digest(safe, options.profile)}};
  report.output_digest = adapter_digest(result.adapter, options.profile);
  report.decisions = std::move(decisions);
  report.expected_total = population_of(fine_tuned);
  report.recount();
  return result;
}

PipelineResult run_safemerge(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                             const WeightSource& aligned, const WeightSource& unaligned,
                             const MergePolicy& policy, const PipelineOptions& options) {
  policy.validate();
  const auto scores = score_layers(fine_tuned, aligned, unaligned, options);
  PipelineResult result = run_safemerge_scored(fine_tuned, safe, scores, policy, options);
  result.report.input_digests.emplace_back("aligned", aligned.digest());
  result.report.input_digests.emplace_back("unaligned", unaligned.digest());
  return result;
}

PipelineResult run_safelora(const AdapterBundle& fine_tuned, const WeightSource& aligned,
                            const WeightSource& unaligned, double tau, const PipelineOptions& options) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw PolicyError("tau must lie in [0, 1], got " + std::to_string(tau));
  const WeightPairLoader loader = make_loader(fine_tuned, aligned, unaligned, options);
  const auto layers = ordered_layers(fine_tuned);
  std::vector<LoraLayer> out_layers(layers.size());
  std::vector<LayerDecision> decisions(layers.size());
  parallel_for(layers.size(), options.workers, [&](std::size_t i) {
    const LoraLayer& layer = *layers[i];
    WeightPair pair = loader.load(layer.key);
    const SubspaceOperator op = alignment_matrix(layer.key, pair.aligned, pair.unaligned);
    LayerDecision d = scored_decision(op.cosine_score(layer.factors()), layer, tau);
    out_layers[i] = layer;
    if (d.flagged) {
      if (op.v_norm() == 0.0) {
        d.notes.push_back("zero-subspace-not-projectable");
      } else {
        out_layers[i] = safelora_project(layer, op);
        d.merged = true;
        d.strategy = "project";
      }
    }
    decisions[i] = std::move(d);
  });

  PipelineResult result;
  result.adapter.target_modules = fine_tuned.target_modules;
  for (auto& l : out_layers) {
    std::string key = l.key;
    result.adapter.layers.emplace(std::move(key), std::move(l));
  }
  MergeReport& report = result.report;
  report.mode = "project";
  report.policy["tau"] = tau;
  report.input_digests = {{"fine_tuned", adapter_digest(fine_tuned, options.profile)},
                          {"aligned", aligned.digest()},
                          {"unaligned", unaligned.digest()}};
  report.output_digest = adapter_digest(result.adapter, options.profile);
  report.decisions = std::move(decisions);
  report.expected_total = population_of(fine_tuned);
  report.recount();
  return result;
}

PipelineResult run_resta(const AdapterBundle& sft, const AdapterBundle& harmful, const RestaOptions& resta,
                         const PipelineOptions& options) {
  if (!(resta.alpha > 0.0) || !std::isfinite(resta.alpha)) {
    throw PolicyError("RESTA weight must be positive (a zero weight leaves the adapter unchanged), got " +
                      std::to_string(resta.alpha));
  }
  const RankMode mode = resta.rank_mode.value_or(resta.dare ? RankMode::dense() : RankMode::concat());
  std::vector<std::string> diff;
  for (const auto& [k, l] : sft.layers) {
    if (!harmful.layers.count(k)) diff.push_back("-" + k + " (missing in harmful)");
  }
  for (const auto& [k, l] : harmful.layers) {
    if (!sft.layers.count(k)) diff.push_back("+" + k + " (only in harmful)");
  }
  if (!diff.empty()) throw MissingKeyError("adapter keys differ: " + join(diff));

  const auto layers = ordered_layers(sft);
  std::vector<LoraLayer> out_layers(layers.size());
  std::vector<LayerDecision> decisions(layers.size());
  parallel_for(layers.size(), options.workers, [&](std::size_t i) {
    const LoraLayer& layer = *layers[i];
    MergeOutcome m = resta_merge(layer, harmful.layers.at(layer.key), resta.alpha, resta.dare, mode,
                                 resta.negated);
    LayerDecision d;
    d.key = layer.key;
    d.merged = true;
    d.strategy = resta.dare ? "resta_dare" : "resta";
    d.w_f = 1.0;
    d.w_s = resta.alpha;
    d.rank_in = layer.rank();
    d.rank_out = m.layer.rank();
    d.reconstruction_error = m.reconstruction_error;
    d.norm_before = frobenius_norm(layer.factors());
    d.norm_after = frobenius_norm(m.layer.factors());
    out_layers[i] = std::move(m.layer);
    decisions[i] = std::move(d);
  });

  PipelineResult result;
  result.adapter.target_modules = sft.target_modules;
  for (auto& l : out_layers) {
    std::string key = l.key;
    result.adapter.layers.emplace(std::move(key), std::move(l));
  }
  MergeReport& report = result.report;
  report.mode = "resta";
  report.policy["alpha"] = resta.alpha;
  report.policy["dare_density"] = resta.dare ? ordered_json(resta.dare->density) : ordered_json(nullptr);
  report.policy["seed"] = resta.dare ? ordered_json(resta.dare->seed) : ordered_json(nullptr);
  report.policy["negated_factor"] = resta.negated == NegatedFactor::kB ? "lora_B" : "lora_A";
  report.policy["rank_mode"] = to_string(mode);
  report.input_digests = {{"sft", adapter_digest(sft, options.profile)},
                          {"harmful", adapter_digest(harmful, options.profile)}};
  report.output_digest = adapter_digest(result.adapter, options.profile);
  report.decisions = std::move(decisions);
  report.expected_total = population_of(sft);
  report.recount();
  return result;
}

double safety_score(const EvalScores& e) {
  for (double v : {e.direct_harm, e.hexphi}) {
    if (!std::isfinite(v) || v < 0.0 || v > 100.0) {
      throw ValidationError("harmfulness rates must be percentages in [0, 100], got " + format_real(v));
    }
  }
  return ((100.0 - e.direct_harm) + (100.0 - e.hexphi)) / 2.0;
}

SweepResult sweep_scored(const AdapterBundle& fine_tuned, const AdapterBundle& safe,
                         const std::vector<LayerScore>& scores, const SweepGrid& grid,
                         const PipelineOptions& options) {
  if (grid.taus.empty() || grid.weights.empty() || grid.strategies.empty()) {
    throw ValidationError("sweep grid needs at least one tau, one weight pair and one strategy");
  }
  for (double t : grid.taus) {
    if (!(t >= 0.0 && t <= 1.0)) throw PolicyError("tau must lie in [0, 1], got " + format_real(t));
  }
  const double max_tau = *std::max_element(grid.taus.begin(), grid.taus.end());
  double rho_sum = 0.0;
  for (const auto& s : scores) rho_sum += s.rho;
  const double mean_rho = scores.empty() ? 0.0 : rho_sum / static_cast<double>(scores.size());

  SweepResult result;
  for (Strategy strategy : grid.strategies) {
    std::vector<std::optional<double>> densities;
    if (strategy == Strategy::kLinear) {
      densities.push_back(std::nullopt);
    } else {
      if (grid.densities.empty()) throw ValidationError("sweep grid needs a density for " +
                                                        std::string(to_string(strategy)));
      densities.assign(grid.densities.begin(), grid.densities.end());
    }
    for (const auto& density : densities) {
      for (const auto& [w_f, w_s] : grid.weights) {
        MergePolicy policy;
        policy.strategy = strategy;
        policy.w_f = w_f;
        policy.w_s = w_s;
        policy.density = density.value_or(1.0);
        policy.seed = grid.seed;
        policy.rank_mode = grid.rank_mode.value_or(default_rank_mode(strategy));
        // Rows need rho < tau <= max_tau, so merging at max_tau covers every row.
        policy.tau = max_tau;
        const PipelineResult merged = run_safemerge_scored(fine_tuned, safe, scores, policy, options);
        for (double tau : grid.taus) {
          SweepRow row;
          row.tau = tau;
          row.strategy = strategy;
          row.w_f = w_f;
          row.w_s = w_s;
          row.density = density;
          row.rank_mode = policy.rank_mode;
          row.total_count = scores.size();
          row.mean_rho = mean_rho;
          double merged_rho = 0.0, err_sum = 0.0;
          for (const auto& d : merged.report.decisions) {
            if (!(d.rho && *d.rho < tau)) continue;
            ++row.flagged_count;
            if (!d.merged) continue;
            ++row.merged_count;
            merged_rho += *d.rho;
            err_sum += d.reconstruction_error;
            row.max_reconstruction_error = std::max(row.max_reconstruction_error, d.reconstruction_error);
          }
          if (row.merged_count > 0) {
            row.mean_rho_merged = merged_rho / static_cast<double>(row.merged_count);
            row.mean_reconstruction_error = err_sum / static_cast<double>(row.merged_count);
          }
          result.rows.push_back(row);
        }
      }
    }
  }
  return result;
}

SweepResult sweep(const AdapterBundle& fine_tuned, const AdapterBundle& safe, const WeightSource& aligned,
                  const WeightSource& unaligned, const SweepGrid& grid, const PipelineOptions& options) {
  ScoringStats stats;
  const auto scores = score_layers(fine_tuned, aligned, unaligned, options, &stats);
  SweepResult result = sweep_scored(fine_tuned, safe, scores, grid, options);
  result.stats = stats;
  return result;
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out << "tau,strategy,w_f,w_s,density,rank_mode,total_count,flagged_count,merged_count,mean_rho,"
         "mean_rho_merged,mean_reconstruction_error,max_reconstruction_error\n";
  for (const auto& r : rows) {
    out << format_real(r.tau) << ',' << to_string(r.strategy) << ',' << format_real(r.w_f) << ','
        << format_real(r.w_s) << ',' << (r.density ? format_real(*r.density) : "") << ','
        << to_string(r.rank_mode) << ',' << r.total_count << ',' << r.flagged_count << ','
        << r.merged_count << ',' << format_real(r.mean_rho) << ',' << format_real(r.mean_rho_merged)
        << ',' << format_real(r.mean_reconstruction_error) << ','
        << format_real(r.max_reconstruction_error) << '\n';
  }
  return out.str();
}

}  // namespace lorasafe
