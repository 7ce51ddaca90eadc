// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lorasafe/matrix.hpp"
#include "lorasafe/safetensors.hpp"

namespace lorasafe {

using Shape2 = std::pair<std::size_t, std::size_t>;

/// Full-model weights addressed by tensor name. Implementations must allow
/// concurrent load() calls.
class WeightSource {
 public:
  virtual ~WeightSource() = default;

  virtual bool contains(const std::string& name) const = 0;
  /// Throws MissingKeyError for unknown names, FormatError for non-2-D tensors.
  virtual Shape2 shape(const std::string& name) const = 0;
  virtual Matrix load(const std::string& name) const = 0;
  /// Content hash of the source, recorded in reports.
  virtual std::string digest() const = 0;
};

/// Single safetensors file or a sharded checkpoint described by an index
/// file {"weight_map": {tensor: shard}}. `path` may be a .safetensors file,
/// an index .json, or a directory holding model.safetensors.index.json or
/// model.safetensors.
class SafetensorsWeightSource final : public WeightSource {
 public:
  static SafetensorsWeightSource open(const std::filesystem::path& path);

  bool contains(const std::string& name) const override;
  Shape2 shape(const std::string& name) const override;
  Matrix load(const std::string& name) const override;
  /// SHA-256 over (name, dtype, shape, payload) of every tensor in name order,
  /// so sharding does not change it. Not counted by payload_bytes_read().
  std::string digest() const override;

  std::size_t shard_count() const noexcept { return shards_.size(); }
  std::uint64_t payload_bytes_read() const;

 private:
  std::vector<SafetensorsFile> shards_;
  std::map<std::string, std::size_t> tensor_to_shard_;
};

/// Weights held in memory, e.g. freshly generated fixtures.
class InMemoryWeightSource final : public WeightSource {
 public:
  explicit InMemoryWeightSource(TensorMap tensors) : tensors_(std::move(tensors)) {}

  bool contains(const std::string& name) const override { return tensors_.count(name) != 0; }
  Shape2 shape(const std::string& name) const override;
  Matrix load(const std::string& name) const override;
  /// Same framing as SafetensorsWeightSource::digest() with f32 payloads.
  std::string digest() const override;

  const TensorMap& tensors() const noexcept { return tensors_; }

 private:
  TensorMap tensors_;
};

/// Writes `tensors` as `shards` files plus model.safetensors.index.json in
/// `dir`, splitting in sorted name order.
void write_sharded_checkpoint(const TensorMap& tensors, const std::filesystem::path& dir,
                              std::size_t shards);

struct WeightPair {
  Matrix aligned;
  Matrix unaligned;
};

/// Per-key lazy access to aligned/unaligned weight pairs. Construction checks
/// that every requested key exists in both sources with equal 2-D shapes and
/// reports all missing keys at once.
class WeightPairLoader {
 public:
  /// `keys` maps a canonical layer key to the tensor name in the sources.
  WeightPairLoader(const WeightSource& aligned, const WeightSource& unaligned,
                   std::map<std::string, std::string> keys);

  WeightPair load(const std::string& key) const;
  Shape2 shape(const std::string& key) const;
  const std::map<std::string, std::string>& keys() const noexcept { return keys_; }

 private:
  const WeightSource* aligned_;
  const WeightSource* unaligned_;
  std::map<std::string, std::string> keys_;
  std::map<std::string, Shape2> shapes_;
};

inline WeightPairLoader load_weight_pair(const WeightSource& aligned, const WeightSource& unaligned,
                                         std::map<std::string, std::string> keys) {
  return WeightPairLoader(aligned, unaligned, std::move(keys));
}

}  // namespace lorasafe
