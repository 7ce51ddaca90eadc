// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/adapter.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <nlohmann/json.hpp>

#include "lorasafe/digest.hpp"
#include "lorasafe/error.hpp"

namespace lorasafe {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kTensorFile = "adapter_model.safetensors";
constexpr const char* kConfigFile = "adapter_config.json";

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out;
}

}  // namespace

bool NaturalLess::operator()(std::string_view a, std::string_view b) const {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const bool da = std::isdigit(static_cast<unsigned char>(a[i]));
    const bool db = std::isdigit(static_cast<unsigned char>(b[j]));
    if (da && db) {
      std::size_t ie = i, je = j;
      while (ie < a.size() && std::isdigit(static_cast<unsigned char>(a[ie]))) ++ie;
      while (je < b.size() && std::isdigit(static_cast<unsigned char>(b[je]))) ++je;
      // strip leading zeros, then compare by length and digits
      std::size_t is = i, js = j;
      while (is + 1 < ie && a[is] == '0') ++is;
      while (js + 1 < je && b[js] == '0') ++js;
      if (ie - is != je - js) return ie - is < je - js;
      const int c = a.substr(is, ie - is).compare(b.substr(js, je - js));
      if (c != 0) return c < 0;
      if (ie - i != je - j) return ie - i < je - j;
      i = ie;
      j = je;
    } else {
      if (a[i] != b[j]) return static_cast<unsigned char>(a[i]) < static_cast<unsigned char>(b[j]);
      ++i;
      ++j;
    }
  }
  return a.size() - i < b.size() - j;
}

void LoraLayer::validate() const {
  if (A.rows() == 0) throw ValidationError("layer " + key + " has rank 0");
  if (A.rows() != B.cols()) {
    throw DimensionError("layer " + key + ": lora_A " + A.shape() + " and lora_B " + B.shape() +
                         " disagree on rank");
  }
  if (!(lora_alpha > 0.0)) throw ValidationError("layer " + key + ": lora_alpha must be positive");
}

std::string NamingProfile::weight_name(const std::string& key) const {
  auto it = key_map.find(key);
  if (it != key_map.end()) return it->second;
  return key + weight_suffix;
}

bool AdapterBundle::heterogeneous() const {
  std::set<std::size_t> ranks;
  for (const auto& [k, l] : layers) ranks.insert(l.rank());
  return ranks.size() > 1;
}

std::size_t AdapterBundle::dominant_rank() const {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& [k, l] : layers) ++counts[l.rank()];
  std::size_t best = 0, best_count = 0;
  for (const auto& [r, c] : counts) {
    if (c > best_count) {
      best = r;
      best_count = c;
    }
  }
  return best;
}

std::vector<std::string> AdapterBundle::keys() const {
  std::vector<std::string> out;
  out.reserve(layers.size());
  for (const auto& [k, l] : layers) out.push_back(k);
  return out;
}

void AdapterBundle::validate() const {
  for (const auto& [k, l] : layers) {
    if (k != l.key) throw ValidationError("bundle entry " + k + " holds layer " + l.key);
    l.validate();
    if (!target_modules.empty() &&
        std::find(target_modules.begin(), target_modules.end(), module_suffix(k)) ==
            target_modules.end()) {
      throw ValidationError("layer " + k + " is not one of the target modules [" +
                            join(target_modules) + "]");
    }
  }
}

std::string module_suffix(const std::string& key) {
  const auto pos = key.rfind('.');
  return pos == std::string::npos ? key : key.substr(pos + 1);
}

std::optional<std::size_t> layer_index(const std::string& key) {
  static constexpr std::string_view kMarker = "layers.";
  std::size_t pos = 0;
  while ((pos = key.find(kMarker, pos)) != std::string::npos) {
    if (pos == 0 || key[pos - 1] == '.') {
      std::size_t p = pos + kMarker.size();
      std::size_t value = 0;
      std::size_t digits = 0;
      while (p < key.size() && std::isdigit(static_cast<unsigned char>(key[p]))) {
        value = value * 10 + static_cast<std::size_t>(key[p] - '0');
        ++p;
        ++digits;
      }
      if (digits > 0 && (p == key.size() || key[p] == '.')) return value;
    }
    pos += kMarker.size();
  }
  return std::nullopt;
}

AdapterBundle load_adapter(const fs::path& path, const NamingProfile& profile,
                           const AdapterOverrides& overrides) {
  fs::path tensor_path = path;
  fs::path config_path;
  if (fs::is_directory(path)) {
    tensor_path = path / kTensorFile;
    config_path = path / kConfigFile;
  } else {
    config_path = path.parent_path() / kConfigFile;
  }
  if (!fs::exists(tensor_path)) throw IoError("adapter tensors not found: " + tensor_path.string());

  json config = json::object();
  if (fs::exists(config_path)) {
    try {
      config = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
      throw FormatError(config_path.string() + ": malformed adapter config: " + e.what());
    }
  }

  std::optional<std::size_t> rank = overrides.rank;
  std::optional<double> alpha = overrides.lora_alpha;
  std::vector<std::string> targets;
  std::map<std::string, std::size_t> rank_pattern;
  std::map<std::string, double> alpha_pattern;
  bool heterogeneous = false;
  try {
    if (!rank && config.contains("r")) rank = config["r"].get<std::size_t>();
    if (!alpha && config.contains("lora_alpha")) alpha = config["lora_alpha"].get<double>();
    if (overrides.target_modules) {
      targets = *overrides.target_modules;
    } else if (config.contains("target_modules")) {
      if (config["target_modules"].is_string()) {
        targets.push_back(config["target_modules"].get<std::string>());
      } else {
        targets = config["target_modules"].get<std::vector<std::string>>();
      }
    }
    if (config.contains("rank_pattern")) {
      rank_pattern = config["rank_pattern"].get<std::map<std::string, std::size_t>>();
    }
    if (config.contains("alpha_pattern")) {
      alpha_pattern = config["alpha_pattern"].get<std::map<std::string, double>>();
    }
    if (config.contains("heterogeneous_rank")) heterogeneous = config["heterogeneous_rank"].get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(config_path.string() + ": invalid adapter config field: " + e.what());
  }

  const SafetensorsFile file = SafetensorsFile::open(tensor_path);
  auto canonical = [&](std::string_view name, std::string_view suffix) {
    std::string_view k = name.substr(0, name.size() - suffix.size());
    if (starts_with(k, profile.strip_prefix)) k.remove_prefix(profile.strip_prefix.size());
    return std::string(k);
  };

  std::map<std::string, std::string, NaturalLess> a_names, b_names;
  for (const auto& info : file.tensors()) {
    if (ends_with(info.name, profile.a_suffix)) {
      a_names[canonical(info.name, profile.a_suffix)] = info.name;
    } else if (ends_with(info.name, profile.b_suffix)) {
      b_names[canonical(info.name, profile.b_suffix)] = info.name;
    }
  }
  std::vector<std::string> orphans;
  for (const auto& [k, n] : a_names) {
    if (!b_names.count(k)) orphans.push_back(n + " (no lora_B)");
  }
  for (const auto& [k, n] : b_names) {
    if (!a_names.count(k)) orphans.push_back(n + " (no lora_A)");
  }
  if (!orphans.empty()) throw PairingError(tensor_path.string() + ": unpaired tensors: " + join(orphans));
  if (a_names.empty()) throw FormatError(tensor_path.string() + ": no LoRA tensors found");

  AdapterBundle bundle;
  bundle.source_path = path.string();
  std::set<std::string> inferred;
  for (const auto& [key, a_name] : a_names) {
    LoraLayer layer;
    layer.key = key;
    layer.A = file.load(a_name);
    layer.B = file.load(b_names.at(key));
    if (layer.A.rows() != layer.B.cols()) {
      throw DimensionError(tensor_path.string() + ": layer " + key + " lora_A " + layer.A.shape() +
                           " vs lora_B " + layer.B.shape() + " rank mismatch");
    }
    std::optional<std::size_t> expected = rank;
    if (auto it = rank_pattern.find(key); it != rank_pattern.end()) expected = it->second;
    if (expected && *expected != layer.rank() && !heterogeneous) {
      throw DimensionError(tensor_path.string() + ": layer " + key + " has rank " +
                           std::to_string(layer.rank()) + " but metadata declares " +
                           std::to_string(*expected));
    }
    if (auto it = alpha_pattern.find(key); it != alpha_pattern.end()) {
      layer.lora_alpha = it->second;
    } else if (alpha) {
      layer.lora_alpha = *alpha;
    } else {
      throw ValidationError(tensor_path.string() +
                            ": lora_alpha not given by adapter_config.json or flags");
    }
    layer.validate();
    inferred.insert(module_suffix(key));
    bundle.layers.emplace(key, std::move(layer));
  }
  bundle.target_modules = targets.empty() ? std::vector<std::string>(inferred.begin(), inferred.end())
                                          : targets;
  bundle.validate();
  return bundle;
}

TensorMap adapter_tensors(const AdapterBundle& bundle, const NamingProfile& profile) {
  TensorMap out;
  for (const auto& [key, layer] : bundle.layers) {
    out.emplace(profile.strip_prefix + key + profile.a_suffix, layer.A);
    out.emplace(profile.strip_prefix + key + profile.b_suffix, layer.B);
  }
  return out;
}

void write_adapter(const AdapterBundle& bundle, const fs::path& dir, const NamingProfile& profile) {
  bundle.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const std::size_t r = bundle.dominant_rank();
  double alpha = 0.0;
  for (const auto& [k, l] : bundle.layers) {
    if (l.rank() == r) {
      alpha = l.lora_alpha;
      break;
    }
  }
  ordered_json rank_pattern = ordered_json::object();
  ordered_json alpha_pattern = ordered_json::object();
  for (const auto& [k, l] : bundle.layers) {
    if (l.rank() != r) rank_pattern[k] = l.rank();
    if (l.lora_alpha != alpha) alpha_pattern[k] = l.lora_alpha;
  }
  ordered_json config;
  config["peft_type"] = "LORA";
  config["r"] = r;
  config["lora_alpha"] = alpha;
  config["target_modules"] = bundle.target_modules;
  config["heterogeneous_rank"] = bundle.heterogeneous();
  config["rank_pattern"] = rank_pattern;
  config["alpha_pattern"] = alpha_pattern;

  write_safetensors(adapter_tensors(bundle, profile), dir / kTensorFile,
                    {{"format", "pt"}});
  write_file(dir / kConfigFile, config.dump(2) + "\n");
}

std::string adapter_digest(const AdapterBundle& bundle, const NamingProfile& profile) {
  return sha256_hex(serialize_safetensors(adapter_tensors(bundle, profile)));
}

std::size_t expected_layer_population(std::size_t num_layers, std::size_t num_target_modules) {
  return num_layers * num_target_modules;
}

}  // namespace lorasafe
