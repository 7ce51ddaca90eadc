// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorasafe/subspace.hpp"

namespace lorasafe {

inline constexpr const char* kToolName = "lorasafe";
inline constexpr const char* kToolVersion = "0.1.0";

struct LayerDecision {
  std::string key;
  std::optional<double> rho;  // absent for global (unscored) runs
  bool flagged = false;       // rho < tau
  bool merged = false;        // layer content replaced in the output
  std::string strategy = "none";
  double w_f = 1.0;
  double w_s = 0.0;
  std::size_t rank_in = 0;
  std::size_t rank_out = 0;
  double reconstruction_error = 0.0;
  std::optional<DegenerateReason> degenerate;
  std::vector<std::string> notes;
  std::optional<double> norm_before;
  std::optional<double> norm_after;

  friend bool operator==(const LayerDecision&, const LayerDecision&) = default;
};

struct MergeReport {
  std::string tool = kToolName;
  std::string tool_version = kToolVersion;
  std::string mode;
  nlohmann::ordered_json policy = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, std::string>> input_digests;
  std::optional<std::string> output_digest;
  std::vector<LayerDecision> decisions;
  std::size_t merged_count = 0;
  std::size_t flagged_count = 0;
  std::size_t total_count = 0;
  std::optional<std::size_t> expected_total;

  /// Recomputes merged/flagged/total counts from the decisions.
  void recount();

  nlohmann::ordered_json to_json() const;
  static MergeReport from_json(const nlohmann::ordered_json& j);

  /// One row per decision.
  std::string to_csv() const;

  friend bool operator==(const MergeReport&, const MergeReport&) = default;
};

/// Stable field order, two-space indent, trailing newline.
void write_report_json(const MergeReport& report, const std::filesystem::path& path);
MergeReport read_report_json(const std::filesystem::path& path);
void write_report_csv(const MergeReport& report, const std::filesystem::path& path);

/// Shortest decimal form that parses back to the same double.
std::string format_real(double v);

}  // namespace lorasafe
