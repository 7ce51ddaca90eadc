// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorasafe/adapter.hpp"
#include "lorasafe/safetensors.hpp"

namespace lorasafe::cli {

/// How a fine-tuned layer relates to its alignment subspace.
///  - random: unconstrained factors
///  - orthogonal: V is supported on the top half of the rows and B on the
///    bottom half, so V^T delta is exactly zero
///  - inside: B = V G, so delta lies in the column space of V
///  - zero_delta: B = 0
enum class Planting { kRandom, kOrthogonal, kInside, kZeroDelta };

std::string_view to_string(Planting p);
std::optional<Planting> parse_planting(std::string_view s);

struct FixtureSpec {
  std::size_t num_layers = 8;
  std::size_t d_out = 64;
  std::size_t d_in = 64;
  std::size_t rank = 8;
  double lora_alpha = 16.0;
  std::vector<std::string> target_modules{"q_proj", "v_proj"};
  std::size_t subspace_rank = 0;  // 0 -> max(1, min(d_out, d_in) / 8)
  std::uint64_t seed = 0;
  /// Planting per component index (position in layer_keys()).
  std::map<std::size_t, Planting> plants;
  std::size_t shards = 1;

  /// "model.layers.<i>.self_attn.<module>", layer-major.
  std::vector<std::string> layer_keys() const;
  Planting planting_of(std::size_t component) const;

  /// Throws ValidationError for zero or inconsistent dimensions.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static FixtureSpec from_json(const nlohmann::json& j);
};

struct Fixture {
  FixtureSpec spec;
  TensorMap aligned;
  TensorMap unaligned;
  AdapterBundle fine_tuned;
  AdapterBundle safe;
  AdapterBundle harmful;

  /// Spec echo plus per-layer planting and expected rho regime.
  nlohmann::ordered_json manifest() const;
};

/// Deterministic in (spec, seed): every tensor draws from its own keyed
/// stream, so output does not depend on generation order.
Fixture generate_fixture(const FixtureSpec& spec);

/// Layout: aligned.safetensors, unaligned.safetensors (or aligned/ and
/// unaligned/ sharded directories when spec.shards > 1), fine_tuned/, safe/,
/// harmful/ adapters and manifest.json.
void write_fixture(const Fixture& fixture, const std::filesystem::path& dir);

/// Paths inside a fixture directory written by write_fixture.
struct FixturePaths {
  std::filesystem::path aligned;
  std::filesystem::path unaligned;
  std::filesystem::path fine_tuned;
  std::filesystem::path safe;
  std::filesystem::path harmful;
  std::filesystem::path manifest;
};
FixturePaths fixture_paths(const std::filesystem::path& dir, std::size_t shards);

}  // namespace lorasafe::cli
