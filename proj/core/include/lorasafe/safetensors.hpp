// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lorasafe/matrix.hpp"

namespace lorasafe {

// Container layout: u64 little-endian header length, UTF-8 JSON header
// {name: {dtype, shape, data_offsets}}, then the contiguous payload. Offsets
// are relative to the start of the payload.

enum class DType { kF32, kF16, kBF16 };

std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

struct TensorInfo {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::size_t element_count() const;
};

/// Lazily indexed safetensors file. Opening parses only the header; tensor
/// payloads are read on demand. Safe for concurrent load() calls.
class SafetensorsFile {
 public:
  static SafetensorsFile open(const std::filesystem::path& path);

  const std::filesystem::path& path() const noexcept { return path_; }
  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
  const std::string& header_json() const noexcept { return header_; }

  const TensorInfo* find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name) != nullptr; }

  /// Decodes a 2-D tensor to float32. Throws MissingKeyError for an unknown
  /// name, FormatError for a non-2-D tensor and NumericError on NaN/Inf.
  Matrix load(const std::string& name) const;

  /// Undecoded payload bytes of one tensor. Not counted by payload_bytes_read().
  std::string raw_bytes(const std::string& name) const;

  /// Payload bytes read by load() so far, headers excluded.
  std::uint64_t payload_bytes_read() const noexcept { return bytes_read_->load(); }

 private:
  std::string read_payload(const TensorInfo& info) const;

  std::filesystem::path path_;
  std::string header_;
  std::uint64_t data_start_ = 0;
  std::vector<TensorInfo> tensors_;
  std::map<std::string, std::size_t> by_name_;
  std::map<std::string, std::string> metadata_;
  std::shared_ptr<std::atomic<std::uint64_t>> bytes_read_ =
      std::make_shared<std::atomic<std::uint64_t>>(0);
};

using TensorMap = std::map<std::string, Matrix>;

/// Canonical serialization: names in sorted order, compact header padded with
/// spaces to an 8-byte boundary, f32 payload. Identical input gives identical bytes.
std::string serialize_safetensors(const TensorMap& tensors,
                                  const std::map<std::string, std::string>& metadata = {});

void write_safetensors(const TensorMap& tensors, const std::filesystem::path& path,
                       const std::map<std::string, std::string>& metadata = {});

/// Alias of SafetensorsFile::open, kept for symmetry with write_safetensors.
inline SafetensorsFile read_safetensors(const std::filesystem::path& path) {
  return SafetensorsFile::open(path);
}

/// Writes raw bytes, reporting failures as IoError with the path.
void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace lorasafe
