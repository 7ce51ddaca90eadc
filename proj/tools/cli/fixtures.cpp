// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/rng.hpp"
#include "lorasafe/weights.hpp"

namespace lorasafe::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed,
                const std::string& key, std::string_view tag) {
  const KeyedStream stream(seed, key, tag);
  Matrix m(rows, cols);
  auto v = m.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    // Box-Muller on two keyed uniforms; 1 - u keeps the log argument positive.
    const double u1 = 1.0 - stream.uniform(2 * i);
    const double u2 = stream.uniform(2 * i + 1);
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    v[i] = static_cast<float>(stddev * z);
  }
  return m;
}

LoraLayer random_layer(const FixtureSpec& spec, const std::string& key, std::string_view tag) {
  LoraLayer l;
  l.key = key;
  l.lora_alpha = spec.lora_alpha;
  l.A = gaussian(spec.rank, spec.d_in, 1.0 / std::sqrt(static_cast<double>(spec.d_in)), spec.seed, key,
                 std::string(tag) + ".A");
  l.B = gaussian(spec.d_out, spec.rank, 0.05, spec.seed, key, std::string(tag) + ".B");
  return l;
}

std::string_view expected_regime(Planting p) {
  switch (p) {
    case Planting::kRandom: return "unconstrained";
    case Planting::kOrthogonal: return "rho=0 (orthogonal-delta)";
    case Planting::kInside: return "high";
    case Planting::kZeroDelta: return "rho=1 (zero-delta)";
  }
  return "?";
}

}  // namespace

std::string_view to_string(Planting p) {
  switch (p) {
    case Planting::kRandom: return "random";
    case Planting::kOrthogonal: return "orthogonal";
    case Planting::kInside: return "inside";
    case Planting::kZeroDelta: return "zero_delta";
  }
  return "?";
}

std::optional<Planting> parse_planting(std::string_view s) {
  if (s == "random") return Planting::kRandom;
  if (s == "orthogonal" || s == "orthogonal-to-subspace") return Planting::kOrthogonal;
  if (s == "inside" || s == "inside-subspace") return Planting::kInside;
  if (s == "zero_delta" || s == "zero-delta") return Planting::kZeroDelta;
  return std::nullopt;
}

std::vector<std::string> FixtureSpec::layer_keys() const {
  std::vector<std::string> keys;
  keys.reserve(num_layers * target_modules.size());
  for (std::size_t i = 0; i < num_layers; ++i) {
    for (const auto& m : target_modules) {
      keys.push_back("model.layers." + std::to_string(i) + ".self_attn." + m);
    }
  }
  return keys;
}

Planting FixtureSpec::planting_of(std::size_t component) const {
  auto it = plants.find(component);
  return it == plants.end() ? Planting::kRandom : it->second;
}

void FixtureSpec::validate() const {
  if (num_layers == 0 || d_out == 0 || d_in == 0 || rank == 0) {
    throw ValidationError("fixture dimensions, layer count and rank must be positive");
  }
  if (target_modules.empty()) throw ValidationError("fixture needs at least one target module");
  if (rank > std::min(d_out, d_in)) {
    throw ValidationError("fixture rank " + std::to_string(rank) + " exceeds min(d_out, d_in)");
  }
  if (!(lora_alpha > 0.0)) throw ValidationError("fixture lora_alpha must be positive");
  if (shards == 0) throw ValidationError("fixture shard count must be at least 1");
  const std::size_t components = num_layers * target_modules.size();
  for (const auto& [idx, p] : plants) {
    if (idx >= components) {
      throw ValidationError("planted component " + std::to_string(idx) + " out of range (" +
                            std::to_string(components) + " components)");
    }
    if (p == Planting::kOrthogonal && d_out < 2) {
      throw ValidationError("orthogonal planting needs d_out >= 2");
    }
  }
}

ordered_json FixtureSpec::to_json() const {
  ordered_json j;
  j["layers"] = num_layers;
  j["d_out"] = d_out;
  j["d_in"] = d_in;
  j["rank"] = rank;
  j["lora_alpha"] = lora_alpha;
  j["target_modules"] = target_modules;
  j["subspace_rank"] = subspace_rank;
  j["seed"] = seed;
  j["shards"] = shards;
  ordered_json plants_json = ordered_json::object();
  for (const auto& [idx, p] : plants) {
    const std::string name(to_string(p));
    if (!plants_json.contains(name)) plants_json[name] = ordered_json::array();
    plants_json[name].push_back(idx);
  }
  j["plants"] = plants_json;
  return j;
}

FixtureSpec FixtureSpec::from_json(const nlohmann::json& j) {
  FixtureSpec s;
  try {
    s.num_layers = j.value("layers", s.num_layers);
    s.d_out = j.value("d_out", s.d_out);
    s.d_in = j.value("d_in", s.d_in);
    s.rank = j.value("rank", s.rank);
    s.lora_alpha = j.value("lora_alpha", s.lora_alpha);
    s.target_modules = j.value("target_modules", s.target_modules);
    s.subspace_rank = j.value("subspace_rank", s.subspace_rank);
    s.seed = j.value("seed", s.seed);
    s.shards = j.value("shards", s.shards);
    if (j.contains("plants")) {
      for (auto it = j["plants"].begin(); it != j["plants"].end(); ++it) {
        auto p = parse_planting(it.key());
        if (!p) throw ValidationError("unknown planting mode '" + it.key() + "'");
        for (std::size_t idx : it.value().get<std::vector<std::size_t>>()) s.plants[idx] = *p;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid fixture spec: ") + e.what());
  }
  return s;
}

Fixture generate_fixture(const FixtureSpec& spec) {
  spec.validate();
  Fixture fx;
  fx.spec = spec;
  const std::size_t k = spec.subspace_rank > 0
                            ? spec.subspace_rank
                            : std::max<std::size_t>(1, std::min(spec.d_out, spec.d_in) / 8);
  const std::size_t half = spec.d_out / 2;
  NamingProfile profile;

  const auto keys = spec.layer_keys();
  for (std::size_t c = 0; c < keys.size(); ++c) {
    const std::string& key = keys[c];
    const Planting planting = spec.planting_of(c);

    Matrix unaligned = gaussian(spec.d_out, spec.d_in, 0.02, spec.seed, key, "unaligned");
    Matrix p = gaussian(spec.d_out, k, 1.0, spec.seed, key, "subspace.P");
    const Matrix q = gaussian(k, spec.d_in, 1.0, spec.seed, key, "subspace.Q");
    if (planting == Planting::kOrthogonal) {
      for (std::size_t i = half; i < spec.d_out; ++i) std::fill(p.row(i).begin(), p.row(i).end(), 0.0f);
    }
    const MatrixD v = multiply(p, q);
    const double v_scale = 0.01 / std::sqrt(static_cast<double>(k));
    Matrix aligned(spec.d_out, spec.d_in);
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      aligned.values()[i] =
          static_cast<float>(static_cast<double>(unaligned.values()[i]) + v_scale * v.values()[i]);
    }

    LoraLayer ft = random_layer(spec, key, "fine_tuned");
    switch (planting) {
      case Planting::kRandom:
        break;
      case Planting::kOrthogonal:
        for (std::size_t i = 0; i < half; ++i) std::fill(ft.B.row(i).begin(), ft.B.row(i).end(), 0.0f);
        break;
      case Planting::kInside: {
        // B = V G with V exactly as the tool will recompute it from the files.
        Matrix v_seen(spec.d_out, spec.d_in);
        for (std::size_t i = 0; i < v_seen.size(); ++i) {
          v_seen.values()[i] = aligned.values()[i] - unaligned.values()[i];
        }
        const Matrix g = gaussian(spec.d_in, spec.rank, 1.0, spec.seed, key, "inside.G");
        const MatrixD b = multiply(v_seen, g);
        const double norm = frobenius_norm(b);
        const double target = 0.05 * std::sqrt(static_cast<double>(spec.d_out * spec.rank));
        for (std::size_t i = 0; i < b.size(); ++i) {
          ft.B.values()[i] = static_cast<float>(norm > 0 ? b.values()[i] * target / norm : 0.0);
        }
        break;
      }
      case Planting::kZeroDelta:
        std::fill(ft.B.values().begin(), ft.B.values().end(), 0.0f);
        break;
    }

    const std::string weight = profile.weight_name(key);
    fx.unaligned.emplace(weight, std::move(unaligned));
    fx.aligned.emplace(weight, std::move(aligned));
    fx.fine_tuned.layers.emplace(key, std::move(ft));
    fx.safe.layers.emplace(key, random_layer(spec, key, "safe"));
    fx.harmful.layers.emplace(key, random_layer(spec, key, "harmful"));
  }
  for (AdapterBundle* b : {&fx.fine_tuned, &fx.safe, &fx.harmful}) b->target_modules = spec.target_modules;
  fx.fine_tuned.source_path = "fixture:fine_tuned";
  fx.safe.source_path = "fixture:safe";
  fx.harmful.source_path = "fixture:harmful";
  return fx;
}

ordered_json Fixture::manifest() const {
  ordered_json j;
  j["spec"] = spec.to_json();
  ordered_json layers = ordered_json::array();
  const auto keys = spec.layer_keys();
  for (std::size_t c = 0; c < keys.size(); ++c) {
    const Planting p = spec.planting_of(c);
    ordered_json e;
    e["index"] = c;
    e["key"] = keys[c];
    e["planting"] = std::string(to_string(p));
    e["expected_regime"] = std::string(expected_regime(p));
    e["shape"] = {spec.d_out, spec.d_in};
    e["rank"] = spec.rank;
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  j["expected_layer_population"] = expected_layer_population(spec.num_layers, spec.target_modules);
  return j;
}

FixturePaths fixture_paths(const fs::path& dir, std::size_t shards) {
  FixturePaths p;
  p.aligned = shards > 1 ? dir / "aligned" : dir / "aligned.safetensors";
  p.unaligned = shards > 1 ? dir / "unaligned" : dir / "unaligned.safetensors";
  p.fine_tuned = dir / "fine_tuned";
  p.safe = dir / "safe";
  p.harmful = dir / "harmful";
  p.manifest = dir / "manifest.json";
  return p;
}

void write_fixture(const Fixture& fixture, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const FixturePaths p = fixture_paths(dir, fixture.spec.shards);
  if (fixture.spec.shards > 1) {
    write_sharded_checkpoint(fixture.aligned, p.aligned, fixture.spec.shards);
    write_sharded_checkpoint(fixture.unaligned, p.unaligned, fixture.spec.shards);
  } else {
    write_safetensors(fixture.aligned, p.aligned);
    write_safetensors(fixture.unaligned, p.unaligned);
  }
  write_adapter(fixture.fine_tuned, p.fine_tuned);
  write_adapter(fixture.safe, p.safe);
  write_adapter(fixture.harmful, p.harmful);
  write_file(p.manifest, fixture.manifest().dump(2) + "\n");
}

}  // namespace lorasafe::cli
