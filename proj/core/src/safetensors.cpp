// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/safetensors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "lorasafe/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "payload decoding assumes a little-endian host");

namespace lorasafe {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

DType parse_dtype(const std::string& s, const std::string& tensor) {
  if (s == "F32") return DType::kF32;
  if (s == "F16") return DType::kF16;
  if (s == "BF16") return DType::kBF16;
  throw FormatError("tensor '" + tensor + "' has unsupported dtype " + s);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits = 0;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      mant &= 0x3FFu;
      bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | mant << 13;
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | mant << 13;
  } else {
    bits = sign | (exp + 127 - 15) << 23 | mant << 13;
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "F32";
    case DType::kF16: return "F16";
    case DType::kBF16: return "BF16";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) { return dtype == DType::kF32 ? 4 : 2; }

std::size_t TensorInfo::element_count() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

SafetensorsFile SafetensorsFile::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::error_code ec;
  const std::uint64_t file_size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());

  unsigned char len_bytes[8];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) {
    throw FormatError(path.string() + ": file shorter than the 8-byte header length");
  }
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = header_len << 8 | len_bytes[i];
  if (header_len > kMaxHeaderBytes || header_len > file_size - 8) {
    throw FormatError(path.string() + ": header length " + std::to_string(header_len) +
                      " exceeds file size");
  }

  SafetensorsFile f;
  f.path_ = path;
  f.header_.resize(header_len);
  if (!in.read(f.header_.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError(path.string() + ": truncated header");
  }
  f.data_start_ = 8 + header_len;
  const std::uint64_t data_size = file_size - f.data_start_;

  json header;
  try {
    header = json::parse(f.header_);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header JSON: " + e.what());
  }
  if (!header.is_object()) throw FormatError(path.string() + ": header is not a JSON object");

  for (auto it = header.begin(); it != header.end(); ++it) {
    const std::string& name = it.key();
    const json& entry = it.value();
    if (name == "__metadata__") {
      if (!entry.is_object()) throw FormatError(path.string() + ": __metadata__ is not an object");
      for (auto m = entry.begin(); m != entry.end(); ++m) {
        if (!m.value().is_string()) {
          throw FormatError(path.string() + ": metadata value '" + m.key() + "' is not a string");
        }
        f.metadata_[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    TensorInfo info;
    info.name = name;
    try {
      info.dtype = parse_dtype(entry.at("dtype").get<std::string>(), name);
      info.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2) throw FormatError("tensor '" + name + "' data_offsets must have 2 entries");
      info.begin = offsets[0];
      info.end = offsets[1];
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": tensor '" + name + "' has a malformed entry: " + e.what());
    }
    if (info.end < info.begin ||
        info.end - info.begin != info.element_count() * dtype_size(info.dtype)) {
      throw FormatError(path.string() + ": tensor '" + name + "' offsets disagree with shape/dtype");
    }
    if (info.end > data_size) {
      throw FormatError(path.string() + ": truncated payload for tensor '" + name + "'");
    }
    f.by_name_[name] = f.tensors_.size();
    f.tensors_.push_back(std::move(info));
  }
  return f;
}

const TensorInfo* SafetensorsFile::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &tensors_[it->second];
}

std::string SafetensorsFile::read_payload(const TensorInfo& info) const {
  std::string raw(info.end - info.begin, '\0');
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open " + path_.string());
  in.seekg(static_cast<std::streamoff>(data_start_ + info.begin));
  if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path_.string() + ": truncated payload for tensor '" + info.name + "'");
  }
  return raw;
}

std::string SafetensorsFile::raw_bytes(const std::string& name) const {
  const TensorInfo* info = find(name);
  if (info == nullptr) throw MissingKeyError(path_.string() + ": no tensor named '" + name + "'");
  return read_payload(*info);
}

Matrix SafetensorsFile::load(const std::string& name) const {
  const TensorInfo* info = find(name);
  if (info == nullptr) throw MissingKeyError(path_.string() + ": no tensor named '" + name + "'");
  if (info->shape.size() != 2) {
    throw FormatError(path_.string() + ": tensor '" + name + "' is not 2-D");
  }

  const std::size_t count = info->element_count();
  const std::string raw = read_payload(*info);
  bytes_read_->fetch_add(raw.size());

  std::vector<float> values(count);
  switch (info->dtype) {
    case DType::kF32:
      std::memcpy(values.data(), raw.data(), raw.size());
      break;
    case DType::kF16:
      for (std::size_t i = 0; i < count; ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        values[i] = half_to_float(h);
      }
      break;
    case DType::kBF16:
      for (std::size_t i = 0; i < count; ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
      }
      break;
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(path_.string() + ": non-finite value in tensor '" + name + "'");
  }
  return Matrix(info->shape[0], info->shape[1], std::move(values));
}

std::string serialize_safetensors(const TensorMap& tensors,
                                  const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    if (name.empty()) throw ValidationError("tensor names must be non-empty");
    if (name == "__metadata__") throw ValidationError("'__metadata__' is reserved");
    const std::uint64_t bytes = static_cast<std::uint64_t>(m.size()) * 4;
    header[name] = {{"dtype", "F32"},
                    {"shape", {m.rows(), m.cols()}},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header_str = header.dump();
  header_str.append((8 - header_str.size() % 8) % 8, ' ');

  std::string out;
  out.reserve(8 + header_str.size() + offset);
  std::uint64_t len = header_str.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += header_str;
  for (const auto& [name, m] : tensors) {
    auto v = m.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  return out;
}

void write_safetensors(const TensorMap& tensors, const std::filesystem::path& path,
                       const std::map<std::string, std::string>& metadata) {
  write_file(path, serialize_safetensors(tensors, metadata));
}

}  // namespace lorasafe
