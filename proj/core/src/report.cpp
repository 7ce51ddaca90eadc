// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/report.hpp"

#include <charconv>
#include <sstream>

#include "lorasafe/error.hpp"
#include "lorasafe/safetensors.hpp"

namespace lorasafe {

using ordered_json = nlohmann::ordered_json;

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void MergeReport::recount() {
  merged_count = 0;
  flagged_count = 0;
  for (const auto& d : decisions) {
    merged_count += d.merged ? 1 : 0;
    flagged_count += d.flagged ? 1 : 0;
  }
  total_count = decisions.size();
}

ordered_json MergeReport::to_json() const {
  ordered_json j;
  j["tool"] = tool;
  j["tool_version"] = tool_version;
  j["mode"] = mode;
  j["policy"] = policy;
  ordered_json digests = ordered_json::object();
  for (const auto& [name, d] : input_digests) digests[name] = d;
  j["input_digests"] = digests;
  j["output_digest"] = output_digest ? ordered_json(*output_digest) : ordered_json(nullptr);
  j["total_count"] = total_count;
  j["flagged_count"] = flagged_count;
  j["merged_count"] = merged_count;
  j["expected_total"] = expected_total ? ordered_json(*expected_total) : ordered_json(nullptr);
  ordered_json list = ordered_json::array();
  for (const auto& d : decisions) {
    ordered_json e;
    e["key"] = d.key;
    e["rho"] = d.rho ? ordered_json(*d.rho) : ordered_json(nullptr);
    e["flagged"] = d.flagged;
    e["merged"] = d.merged;
    e["strategy"] = d.strategy;
    e["weights"] = {d.w_f, d.w_s};
    e["rank_in"] = d.rank_in;
    e["rank_out"] = d.rank_out;
    e["reconstruction_error"] = d.reconstruction_error;
    e["degenerate_reason"] =
        d.degenerate ? ordered_json(std::string(to_string(*d.degenerate))) : ordered_json(nullptr);
    e["notes"] = d.notes;
    e["norm_before"] = d.norm_before ? ordered_json(*d.norm_before) : ordered_json(nullptr);
    e["norm_after"] = d.norm_after ? ordered_json(*d.norm_after) : ordered_json(nullptr);
    list.push_back(std::move(e));
  }
  j["decisions"] = std::move(list);
  return j;
}

MergeReport MergeReport::from_json(const ordered_json& j) {
  MergeReport r;
  try {
    r.tool = j.at("tool").get<std::string>();
    r.tool_version = j.at("tool_version").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.policy = j.at("policy");
    for (auto it = j.at("input_digests").begin(); it != j.at("input_digests").end(); ++it) {
      r.input_digests.emplace_back(it.key(), it.value().get<std::string>());
    }
    if (!j.at("output_digest").is_null()) r.output_digest = j["output_digest"].get<std::string>();
    r.total_count = j.at("total_count").get<std::size_t>();
    r.flagged_count = j.at("flagged_count").get<std::size_t>();
    r.merged_count = j.at("merged_count").get<std::size_t>();
    if (!j.at("expected_total").is_null()) r.expected_total = j["expected_total"].get<std::size_t>();
    for (const auto& e : j.at("decisions")) {
      LayerDecision d;
      d.key = e.at("key").get<std::string>();
      if (!e.at("rho").is_null()) d.rho = e["rho"].get<double>();
      d.flagged = e.at("flagged").get<bool>();
      d.merged = e.at("merged").get<bool>();
      d.strategy = e.at("strategy").get<std::string>();
      d.w_f = e.at("weights").at(0).get<double>();
      d.w_s = e.at("weights").at(1).get<double>();
      d.rank_in = e.at("rank_in").get<std::size_t>();
      d.rank_out = e.at("rank_out").get<std::size_t>();
      d.reconstruction_error = e.at("reconstruction_error").get<double>();
      if (!e.at("degenerate_reason").is_null()) {
        const auto tag = e["degenerate_reason"].get<std::string>();
        d.degenerate = parse_degenerate_reason(tag);
        if (!d.degenerate) throw FormatError("unknown degenerate_reason '" + tag + "'");
      }
      d.notes = e.at("notes").get<std::vector<std::string>>();
      if (!e.at("norm_before").is_null()) d.norm_before = e["norm_before"].get<double>();
      if (!e.at("norm_after").is_null()) d.norm_after = e["norm_after"].get<double>();
      r.decisions.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report JSON: ") + e.what());
  }
  return r;
}

std::string MergeReport::to_csv() const {
  std::ostringstream out;
  out << "key,rho,flagged,merged,strategy,w_f,w_s,rank_in,rank_out,reconstruction_error,"
         "degenerate_reason,notes\n";
  for (const auto& d : decisions) {
    out << d.key << ',' << (d.rho ? format_real(*d.rho) : "") << ',' << (d.flagged ? 1 : 0) << ','
        << (d.merged ? 1 : 0) << ',' << d.strategy << ',' << format_real(d.w_f) << ','
        << format_real(d.w_s) << ',' << d.rank_in << ',' << d.rank_out << ','
        << format_real(d.reconstruction_error) << ','
        << (d.degenerate ? std::string(to_string(*d.degenerate)) : "") << ',';
    for (std::size_t i = 0; i < d.notes.size(); ++i) out << (i ? ";" : "") << d.notes[i];
    out << '\n';
  }
  return out.str();
}

void write_report_json(const MergeReport& report, const std::filesystem::path& path) {
  write_file(path, report.to_json().dump(2) + "\n");
}

MergeReport read_report_json(const std::filesystem::path& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed report JSON: " + e.what());
  }
  return MergeReport::from_json(j);
}

void write_report_csv(const MergeReport& report, const std::filesystem::path& path) {
  write_file(path, report.to_csv());
}

}  // namespace lorasafe
