// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/weights.hpp"

#include <algorithm>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "lorasafe/digest.hpp"
#include "lorasafe/error.hpp"

namespace lorasafe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kIndexName = "model.safetensors.index.json";

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out;
}

// name, dtype and shape framed by NUL bytes, then the little-endian payload.
void hash_tensor(Sha256& h, const std::string& name, DType dtype, const std::vector<std::size_t>& shape,
                 const std::string& raw) {
  std::string frame = name;
  frame += '\0';
  frame += to_string(dtype);
  for (std::size_t d : shape) frame += ':' + std::to_string(d);
  frame += '\0';
  frame += std::to_string(raw.size());
  frame += '\0';
  h.update(frame);
  h.update(raw);
}

}  // namespace

SafetensorsWeightSource SafetensorsWeightSource::open(const fs::path& path) {
  fs::path target = path;
  if (fs::is_directory(path)) {
    if (fs::exists(path / kIndexName)) {
      target = path / kIndexName;
    } else if (fs::exists(path / "model.safetensors")) {
      target = path / "model.safetensors";
    } else {
      throw IoError(path.string() + ": directory has neither " + kIndexName +
                    " nor model.safetensors");
    }
  } else if (!fs::exists(path)) {
    throw IoError("weights not found: " + path.string());
  }

  SafetensorsWeightSource src;
  if (target.extension() == ".json") {
    json index;
    try {
      index = json::parse(read_file(target));
    } catch (const json::exception& e) {
      throw FormatError(target.string() + ": malformed index JSON: " + e.what());
    }
    if (!index.contains("weight_map") || !index["weight_map"].is_object()) {
      throw FormatError(target.string() + ": index has no weight_map object");
    }
    std::map<std::string, std::size_t> shard_ids;
    std::map<std::string, std::string> mapping;
    for (auto it = index["weight_map"].begin(); it != index["weight_map"].end(); ++it) {
      if (!it.value().is_string()) {
        throw FormatError(target.string() + ": weight_map entry '" + it.key() + "' is not a string");
      }
      mapping[it.key()] = it.value().get<std::string>();
      shard_ids.emplace(it.value().get<std::string>(), 0);
    }
    std::size_t next = 0;
    for (auto& [file, id] : shard_ids) {
      id = next++;
      src.shards_.push_back(SafetensorsFile::open(target.parent_path() / file));
    }
    for (const auto& [tensor, file] : mapping) {
      const std::size_t id = shard_ids.at(file);
      if (!src.shards_[id].contains(tensor)) {
        throw FormatError(target.string() + ": index maps '" + tensor + "' to " + file +
                          " which does not contain it");
      }
      src.tensor_to_shard_[tensor] = id;
    }
  } else {
    src.shards_.push_back(SafetensorsFile::open(target));
    for (const auto& info : src.shards_.front().tensors()) src.tensor_to_shard_[info.name] = 0;
  }
  return src;
}

bool SafetensorsWeightSource::contains(const std::string& name) const {
  return tensor_to_shard_.count(name) != 0;
}

Shape2 SafetensorsWeightSource::shape(const std::string& name) const {
  auto it = tensor_to_shard_.find(name);
  if (it == tensor_to_shard_.end()) throw MissingKeyError("weights have no tensor '" + name + "'");
  const TensorInfo* info = shards_[it->second].find(name);
  if (info->shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
  return {info->shape[0], info->shape[1]};
}

Matrix SafetensorsWeightSource::load(const std::string& name) const {
  auto it = tensor_to_shard_.find(name);
  if (it == tensor_to_shard_.end()) throw MissingKeyError("weights have no tensor '" + name + "'");
  return shards_[it->second].load(name);
}

std::string SafetensorsWeightSource::digest() const {
  Sha256 h;
  for (const auto& [tensor, id] : tensor_to_shard_) {
    const TensorInfo* info = shards_[id].find(tensor);
    hash_tensor(h, tensor, info->dtype, info->shape, shards_[id].raw_bytes(tensor));
  }
  return h.finish();
}

std::uint64_t SafetensorsWeightSource::payload_bytes_read() const {
  std::uint64_t total = 0;
  for (const auto& s : shards_) total += s.payload_bytes_read();
  return total;
}

Shape2 InMemoryWeightSource::shape(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw MissingKeyError("weights have no tensor '" + name + "'");
  return {it->second.rows(), it->second.cols()};
}

Matrix InMemoryWeightSource::load(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw MissingKeyError("weights have no tensor '" + name + "'");
  return it->second;
}

std::string InMemoryWeightSource::digest() const {
  Sha256 h;
  for (const auto& [name, m] : tensors_) {
    const auto v = m.values();
    const std::string raw(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    hash_tensor(h, name, DType::kF32, {m.rows(), m.cols()}, raw);
  }
  return h.finish();
}

void write_sharded_checkpoint(const TensorMap& tensors, const fs::path& dir, std::size_t shards) {
  if (shards == 0) throw ValidationError("shard count must be at least 1");
  fs::create_directories(dir);
  const std::size_t per = (tensors.size() + shards - 1) / std::max<std::size_t>(shards, 1);
  json weight_map = json::object();
  auto it = tensors.begin();
  for (std::size_t s = 0; s < shards; ++s) {
    char name[64];
    std::snprintf(name, sizeof(name), "model-%05zu-of-%05zu.safetensors", s + 1, shards);
    TensorMap part;
    for (std::size_t n = 0; n < per && it != tensors.end(); ++n, ++it) {
      part.emplace(it->first, it->second);
      weight_map[it->first] = name;
    }
    write_safetensors(part, dir / name);
  }
  json idx = {{"metadata", {{"total_size", 0}}}, {"weight_map", weight_map}};
  std::uint64_t total = 0;
  for (const auto& [n, m] : tensors) total += m.size() * 4;
  idx["metadata"]["total_size"] = total;
  write_file(dir / kIndexName, idx.dump(2) + "\n");
}

WeightPairLoader::WeightPairLoader(const WeightSource& aligned, const WeightSource& unaligned,
                                   std::map<std::string, std::string> keys)
    : aligned_(&aligned), unaligned_(&unaligned), keys_(std::move(keys)) {
  std::vector<std::string> missing;
  std::vector<std::string> mismatched;
  for (const auto& [key, tensor] : keys_) {
    const bool in_a = aligned_->contains(tensor);
    const bool in_u = unaligned_->contains(tensor);
    if (!in_a) missing.push_back(tensor + " (aligned)");
    if (!in_u) missing.push_back(tensor + " (unaligned)");
    if (!in_a || !in_u) continue;
    const Shape2 sa = aligned_->shape(tensor);
    const Shape2 su = unaligned_->shape(tensor);
    if (sa != su) {
      mismatched.push_back(tensor + " " + Matrix::shape_string(sa.first, sa.second) + " vs " +
                           Matrix::shape_string(su.first, su.second));
    }
    shapes_[key] = sa;
  }
  if (!missing.empty()) throw MissingKeyError("weight tensors missing: " + join(missing));
  if (!mismatched.empty()) {
    throw PairingError("aligned/unaligned shape mismatch: " + join(mismatched));
  }
}

WeightPair WeightPairLoader::load(const std::string& key) const {
  auto it = keys_.find(key);
  if (it == keys_.end()) throw MissingKeyError("layer key not registered: " + key);
  return WeightPair{aligned_->load(it->second), unaligned_->load(it->second)};
}

Shape2 WeightPairLoader::shape(const std::string& key) const {
  auto it = shapes_.find(key);
  if (it == shapes_.end()) throw MissingKeyError("layer key not registered: " + key);
  return it->second;
}

}  // namespace lorasafe
