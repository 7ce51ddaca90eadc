// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorasafe/matrix.hpp"
#include "lorasafe/safetensors.hpp"

namespace lorasafe {

/// Orders strings so that embedded decimal runs compare numerically
/// ("layers.2" < "layers.10").
struct NaturalLess {
  bool operator()(std::string_view a, std::string_view b) const;
};

/// One LoRA update, delta = (lora_alpha / rank) * B * A.
struct LoraLayer {
  std::string key;
  Matrix A;  // rank x d_in
  Matrix B;  // d_out x rank
  double lora_alpha = 1.0;

  std::size_t rank() const noexcept { return A.rows(); }
  std::size_t out_dim() const noexcept { return B.rows(); }
  std::size_t in_dim() const noexcept { return A.cols(); }
  double scale() const noexcept { return lora_alpha / static_cast<double>(rank()); }

  LowRankFactors factors() const { return LowRankFactors{B, A, scale()}; }

  /// Throws DimensionError on a rank mismatch between A and B,
  /// ValidationError on rank 0 or non-positive alpha.
  void validate() const;

  friend bool operator==(const LoraLayer&, const LoraLayer&) = default;
};

/// Maps adapter tensor names to canonical layer keys and canonical keys to
/// full-weight tensor names.
struct NamingProfile {
  std::string strip_prefix = "base_model.model.";
  std::string a_suffix = ".lora_A.weight";
  std::string b_suffix = ".lora_B.weight";
  std::string weight_suffix = ".weight";
  /// Explicit canonical key -> weight tensor name overrides.
  std::map<std::string, std::string> key_map;

  std::string weight_name(const std::string& key) const;
};

struct AdapterBundle {
  std::map<std::string, LoraLayer, NaturalLess> layers;
  std::vector<std::string> target_modules;
  std::string source_path;

  /// True when the layers do not all share one rank.
  bool heterogeneous() const;
  /// Rank shared by most layers (smallest on ties); 0 when empty.
  std::size_t dominant_rank() const;
  std::vector<std::string> keys() const;

  /// Checks key uniqueness against target_modules and every layer's shape.
  void validate() const;
};

struct AdapterOverrides {
  std::optional<std::size_t> rank;
  std::optional<double> lora_alpha;
  std::optional<std::vector<std::string>> target_modules;
};

/// Trailing dotted component of a key ("model.layers.3.self_attn.q_proj" -> "q_proj").
std::string module_suffix(const std::string& key);

/// Decimal layer index embedded as "layers.<n>." in a key, if present.
std::optional<std::size_t> layer_index(const std::string& key);

/// An adapter on disk is a directory holding adapter_model.safetensors and
/// adapter_config.json (keys r, lora_alpha, target_modules, rank_pattern,
/// alpha_pattern, heterogeneous_rank). A bare .safetensors path is also
/// accepted; its config is looked up next to it or taken from `overrides`.
AdapterBundle load_adapter(const std::filesystem::path& path, const NamingProfile& profile = {},
                           const AdapterOverrides& overrides = {});

/// Writes adapter_model.safetensors and adapter_config.json into `dir`.
void write_adapter(const AdapterBundle& bundle, const std::filesystem::path& dir,
                   const NamingProfile& profile = {});

/// The tensors write_adapter would store, keyed by full tensor name.
TensorMap adapter_tensors(const AdapterBundle& bundle, const NamingProfile& profile = {});

/// SHA-256 of the canonical tensor serialization: equal iff every A and B
/// matches bit for bit under the same names.
std::string adapter_digest(const AdapterBundle& bundle, const NamingProfile& profile = {});

/// Number of targeted LoRA layer components in a model.
std::size_t expected_layer_population(std::size_t num_layers, std::size_t num_target_modules);

inline std::size_t expected_layer_population(std::size_t num_layers,
                                             const std::vector<std::string>& target_modules) {
  return expected_layer_population(num_layers, target_modules.size());
}

}  // namespace lorasafe
