// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "cli/fixtures.hpp"
#include "lorasafe/adapter.hpp"
#include "lorasafe/error.hpp"
#include "lorasafe/linalg.hpp"
#include "lorasafe/parallel.hpp"
#include "lorasafe/pipeline.hpp"
#include "lorasafe/weights.hpp"

namespace lorasafe::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kFooter =
    "Configuration precedence: command-line flags > --config JSON file > defaults.\n"
    "A config file is a JSON object keyed by long flag names without dashes,\n"
    "e.g. {\"tau\": 0.5, \"weights\": [0.8, 0.2], \"fine-tuned\": \"ft/\"}.\n"
    "LORASAFE_WORKERS sets the default worker count.\n"
    "Exit codes: 0 ok, 2 usage or validation error, 3 I/O or format error, 4 numeric error.";

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kPolicy:
    case ErrorKind::kMode:
    case ErrorKind::kValidation:
      return kExitUsage;
    case ErrorKind::kNumeric:
    case ErrorKind::kDegenerateSubspace:
      return kExitNumeric;
    default:
      return kExitIo;
  }
}

// Inputs shared by the subcommands.
struct Inputs {
  std::string fine_tuned;
  std::string safe;
  std::string aligned;
  std::string unaligned;
  std::string harmful;
  std::string output;
  std::string report;
  std::string csv;
  std::size_t workers = 1;
  std::string strip_prefix = NamingProfile{}.strip_prefix;
  std::string key_map;
  std::optional<std::size_t> rank;
  std::optional<double> lora_alpha;
};

struct PolicyFlags {
  double tau = 0.5;
  std::string strategy = "linear";
  std::vector<double> weights{0.8, 0.2};
  double density = 1.0;
  std::uint64_t seed = 0;
  std::string rank_mode;
  std::size_t target_rank = 0;
};

NamingProfile make_profile(const Inputs& in) {
  NamingProfile p;
  p.strip_prefix = in.strip_prefix;
  if (!in.key_map.empty()) {
    try {
      p.key_map = json::parse(read_file(in.key_map)).get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
      throw FormatError(in.key_map + ": key map must be a JSON object of strings: " + e.what());
    }
  }
  return p;
}

AdapterBundle load(const std::string& path, const Inputs& in, const NamingProfile& profile) {
  AdapterOverrides o;
  o.rank = in.rank;
  o.lora_alpha = in.lora_alpha;
  return load_adapter(path, profile, o);
}

PipelineOptions pipeline_options(const Inputs& in) {
  return PipelineOptions{make_profile(in), in.workers};
}

RankMode parse_rank_mode(const std::string& name, std::size_t target_rank, Strategy strategy,
                         std::size_t fallback_rank) {
  if (name.empty()) return default_rank_mode(strategy);
  if (name == "concat") return RankMode::concat();
  if (name == "dense") return RankMode::dense();
  if (name == "restore") return RankMode::restore(target_rank > 0 ? target_rank : fallback_rank);
  throw ValidationError("unknown rank mode '" + name + "' (expected concat, dense or restore)");
}

MergePolicy make_policy(const PolicyFlags& f, std::size_t fallback_rank) {
  MergePolicy p;
  auto s = parse_strategy(f.strategy);
  if (!s) throw ValidationError("unknown strategy '" + f.strategy + "' (expected linear, dare_linear or ties)");
  p.strategy = *s;
  if (f.weights.size() != 2) throw ValidationError("--weights takes exactly two values: W_F W_S");
  p.w_f = f.weights[0];
  p.w_s = f.weights[1];
  p.density = f.density;
  p.seed = f.seed;
  p.tau = f.tau;
  p.rank_mode = parse_rank_mode(f.rank_mode, f.target_rank, p.strategy, fallback_rank);
  p.validate();
  return p;
}

fs::path report_path(const Inputs& in, const char* default_name) {
  if (!in.report.empty()) return in.report;
  return fs::path(in.output) / default_name;
}

void write_reports(const MergeReport& report, const Inputs& in, const fs::path& json_path) {
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  write_report_json(report, json_path);
  if (!in.csv.empty()) write_report_csv(report, in.csv);
}

void print_summary(std::ostream& out, const MergeReport& r, const char* verb) {
  fmt::print(out, "{} {} of {} layers ({} below threshold)\n", verb, r.merged_count, r.total_count,
             r.flagged_count);
  if (r.expected_total && *r.expected_total != r.total_count) {
    fmt::print(out, "warning: expected {} layer components, found {}\n", *r.expected_total, r.total_count);
  }
  for (const auto& [name, digest] : r.input_digests) fmt::print(out, "input digest  {:<10} {}\n", name, digest);
  if (r.output_digest) fmt::print(out, "output digest {:<10} {}\n", "", *r.output_digest);
}

void add_naming_flags(CLI::App* sub, Inputs& in) {
  sub->add_option("--strip-prefix", in.strip_prefix, "Prefix removed from adapter tensor names")
      ->capture_default_str();
  sub->add_option("--key-map", in.key_map,
                  "JSON file mapping canonical layer keys to full-weight tensor names");
  sub->add_option("--rank", in.rank, "LoRA rank for adapters without adapter_config.json");
  sub->add_option("--lora-alpha", in.lora_alpha, "lora_alpha for adapters without adapter_config.json");
}

void add_workers_flag(CLI::App* sub, Inputs& in) {
  sub->add_option("--workers", in.workers, "Worker threads (default from LORASAFE_WORKERS, else 1)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

void add_policy_flags(CLI::App* sub, PolicyFlags& p) {
  sub->add_option("--tau", p.tau, "Threshold: layers with rho < tau are merged")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  sub->add_option("--strategy", p.strategy, "linear | dare_linear | ties")->capture_default_str();
  sub->add_option("--weights", p.weights, "Fine-tuned and safe weights W_F W_S")
      ->expected(2)
      ->capture_default_str();
  sub->add_option("--density", p.density, "Kept fraction for dare_linear / ties")
      ->capture_default_str();
  sub->add_option("--seed", p.seed, "Seed for dare_linear masks")->capture_default_str();
  sub->add_option("--rank-mode", p.rank_mode,
                  "concat | dense | restore (default: concat for linear, dense otherwise)");
  sub->add_option("--target-rank", p.target_rank,
                  "Rank kept by --rank-mode restore (default: fine-tuned rank)");
}

// Appends config-file values for flags absent from the command line.
std::vector<std::string> apply_config(std::vector<std::string> args) {
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  json config;
  try {
    config = json::parse(read_file(config_path));
  } catch (const json::exception& e) {
    throw FormatError(config_path + ": malformed config JSON: " + e.what());
  }
  if (!config.is_object()) throw ValidationError(config_path + ": config must be a JSON object");
  auto present = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  auto scalar = [&](const json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
    if (v.is_number_float()) return format_real(v.get<double>());
    throw ValidationError(config_path + ": unsupported config value " + v.dump());
  };
  std::vector<std::string> extra;
  for (auto it = config.begin(); it != config.end(); ++it) {
    const std::string flag = "--" + it.key();
    if (it.key() == "config" || present(flag)) continue;
    const json& v = it.value();
    if (v.is_boolean()) {
      if (v.get<bool>()) extra.push_back(flag);
    } else if (v.is_array()) {
      for (const auto& item : v) {
        extra.push_back(flag);
        extra.push_back(scalar(item));
      }
    } else {
      extra.push_back(flag);
      extra.push_back(scalar(v));
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

std::vector<double> tau_range(double start, double stop, double step) {
  if (!(step > 0.0)) throw ValidationError("--tau-step must be positive");
  if (stop < start) throw ValidationError("--tau-stop must not be below --tau-start");
  const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
  std::vector<double> taus;
  for (std::size_t i = 0; i < count; ++i) {
    // round to 12 decimals so 0.1 + 2 * 0.1 prints as 0.3
    taus.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
  }
  return taus;
}

void export_merged_weights(const AdapterBundle& adapter, const WeightSource& base,
                           const NamingProfile& profile, const fs::path& path) {
  TensorMap out;
  for (const auto& [key, layer] : adapter.layers) {
    const std::string name = profile.weight_name(key);
    Matrix w = base.load(name);
    const Matrix delta = densify(layer.factors());
    if (!w.same_shape(delta)) {
      throw PairingError("base tensor " + name + " " + w.shape() + " vs delta " + delta.shape());
    }
    for (std::size_t i = 0; i < w.size(); ++i) w.values()[i] += delta.values()[i];
    out.emplace(name, std::move(w));
  }
  write_safetensors(out, path);
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Inputs in;
  in.workers = default_workers();
  PolicyFlags pf;
  std::string config_path;

  CLI::App app{"lorasafe: score LoRA layers against a safety-aligned subspace and restore safety by "
               "selective merging"};
  app.footer(kFooter);
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Score every fine-tuned layer; no adapter is written");
  analyze->add_option("--fine-tuned", in.fine_tuned, "Fine-tuned adapter")->required();
  analyze->add_option("--aligned", in.aligned, "Safety-aligned weights (file, index or directory)")->required();
  analyze->add_option("--unaligned", in.unaligned, "Unaligned base weights")->required();
  analyze->add_option("--tau", pf.tau, "Threshold used to flag layers in the report")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  analyze->add_option("--report", in.report, "JSON report path")->required();
  analyze->add_option("--csv", in.csv, "Optional per-layer CSV");
  add_naming_flags(analyze, in);
  add_workers_flag(analyze, in);

  // merge
  std::string export_path;
  std::string base_path;
  auto* merge = app.add_subcommand("merge", "Merge layers with rho < tau with the safe adapter");
  merge->add_option("--fine-tuned", in.fine_tuned, "Fine-tuned adapter")->required();
  merge->add_option("--safe", in.safe, "Safety adapter")->required();
  merge->add_option("--aligned", in.aligned, "Safety-aligned weights")->required();
  merge->add_option("--unaligned", in.unaligned, "Unaligned base weights")->required();
  merge->add_option("--output", in.output, "Output adapter directory")->required();
  merge->add_option("--report", in.report, "JSON report path (default OUTPUT/merge_report.json)");
  merge->add_option("--csv", in.csv, "Optional per-layer CSV");
  merge->add_option("--export-merged-weights", export_path,
                    "Also write base weights plus the merged deltas as dense safetensors");
  merge->add_option("--base", base_path, "Base weights for --export-merged-weights (default --aligned)");
  add_policy_flags(merge, pf);
  add_naming_flags(merge, in);
  add_workers_flag(merge, in);

  // project
  auto* project = app.add_subcommand("project", "Replace layers with rho < tau by their projection C*dW");
  project->add_option("--fine-tuned", in.fine_tuned, "Fine-tuned adapter")->required();
  project->add_option("--aligned", in.aligned, "Safety-aligned weights")->required();
  project->add_option("--unaligned", in.unaligned, "Unaligned base weights")->required();
  project->add_option("--output", in.output, "Output adapter directory")->required();
  project->add_option("--tau", pf.tau, "Threshold: layers with rho < tau are projected")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  project->add_option("--report", in.report, "JSON report path (default OUTPUT/project_report.json)");
  project->add_option("--csv", in.csv, "Optional per-layer CSV");
  add_naming_flags(project, in);
  add_workers_flag(project, in);

  // resta
  double resta_alpha = 0.5;
  std::optional<double> dare_density;
  std::string negate = "b";
  auto* resta = app.add_subcommand("resta", "Add the negated harmful adapter to every layer");
  resta->add_option("--fine-tuned", in.fine_tuned, "Fine-tuned (SFT) adapter")->required();
  resta->add_option("--harmful", in.harmful, "Adapter fine-tuned on harmful data")->required();
  resta->add_option("--output", in.output, "Output adapter directory")->required();
  resta->add_option("--alpha", resta_alpha, "Weight of the negated harmful adapter (> 0)")
      ->capture_default_str();
  resta->add_option("--dare-density", dare_density, "Apply DARE to the negated delta with this density");
  resta->add_option("--seed", pf.seed, "Seed for DARE masks")->capture_default_str();
  resta->add_option("--negate", negate, "Factor to negate: b or a")
      ->check(CLI::IsMember({"a", "b"}))
      ->capture_default_str();
  resta->add_option("--rank-mode", pf.rank_mode, "concat | dense | restore");
  resta->add_option("--target-rank", pf.target_rank, "Rank kept by --rank-mode restore");
  resta->add_option("--report", in.report, "JSON report path (default OUTPUT/resta_report.json)");
  resta->add_option("--csv", in.csv, "Optional per-layer CSV");
  add_naming_flags(resta, in);
  add_workers_flag(resta, in);

  // sweep
  std::vector<double> taus;
  double tau_start = 0.1, tau_stop = 1.0, tau_step = 0.1;
  std::vector<std::string> weight_grid{"0.8:0.2"};
  std::vector<std::string> strategies{"linear"};
  std::vector<double> densities{0.5};
  auto* sweep_cmd = app.add_subcommand("sweep", "Merge statistics over a grid of policies, as CSV");
  sweep_cmd->add_option("--fine-tuned", in.fine_tuned, "Fine-tuned adapter")->required();
  sweep_cmd->add_option("--safe", in.safe, "Safety adapter")->required();
  sweep_cmd->add_option("--aligned", in.aligned, "Safety-aligned weights")->required();
  sweep_cmd->add_option("--unaligned", in.unaligned, "Unaligned base weights")->required();
  sweep_cmd->add_option("--csv", in.csv, "Output CSV, one row per grid point")->required();
  auto* taus_opt = sweep_cmd->add_option("--taus", taus, "Explicit threshold list");
  sweep_cmd->add_option("--tau-start", tau_start, "First threshold of a range")->capture_default_str()
      ->excludes(taus_opt);
  sweep_cmd->add_option("--tau-stop", tau_stop, "Last threshold of a range")->capture_default_str()
      ->excludes(taus_opt);
  sweep_cmd->add_option("--tau-step", tau_step, "Threshold increment")->capture_default_str()
      ->excludes(taus_opt);
  sweep_cmd->add_option("--weights-grid", weight_grid, "Weight pairs as W_F:W_S")->capture_default_str();
  sweep_cmd->add_option("--strategies", strategies, "Strategies to sweep")->capture_default_str();
  sweep_cmd->add_option("--densities", densities, "Densities for dare_linear / ties")->capture_default_str();
  sweep_cmd->add_option("--seed", pf.seed, "Seed for dare_linear masks")->capture_default_str();
  sweep_cmd->add_option("--rank-mode", pf.rank_mode, "concat | dense | restore (per-strategy default)");
  sweep_cmd->add_option("--target-rank", pf.target_rank, "Rank kept by --rank-mode restore");
  add_naming_flags(sweep_cmd, in);
  add_workers_flag(sweep_cmd, in);

  // score
  double direct_harm = 0.0, hexphi = 0.0;
  auto* score = app.add_subcommand("score", "Safety score from DirectHarm and HexPhi harmfulness rates");
  score->add_option("--direct-harm", direct_harm, "DirectHarm harmfulness rate in percent")->required();
  score->add_option("--hexphi", hexphi, "HexPhi harmfulness rate in percent")->required();

  // gen-fixtures
  FixtureSpec fspec;
  std::string fixture_out;
  std::string fixture_spec_path;
  std::vector<std::string> plants;
  auto* gen = app.add_subcommand("gen-fixtures", "Write a seeded synthetic fixture with planted layers");
  gen->add_option("--out", fixture_out, "Output directory")->required();
  gen->add_option("--spec", fixture_spec_path, "Fixture description JSON (flags override it)");
  gen->add_option("--layers", fspec.num_layers, "Number of transformer layers")->capture_default_str();
  gen->add_option("--d-out", fspec.d_out, "Output dimension of each weight")->capture_default_str();
  gen->add_option("--d-in", fspec.d_in, "Input dimension of each weight")->capture_default_str();
  gen->add_option("--lora-rank", fspec.rank, "LoRA rank")->capture_default_str();
  gen->add_option("--lora-alpha", fspec.lora_alpha, "LoRA alpha")->capture_default_str();
  gen->add_option("--modules", fspec.target_modules, "Target modules")->capture_default_str();
  gen->add_option("--subspace-rank", fspec.subspace_rank, "Rank of W_aligned - W_unaligned (0 = auto)")
      ->capture_default_str();
  gen->add_option("--seed", fspec.seed, "Seed")->capture_default_str();
  gen->add_option("--shards", fspec.shards, "Write weights as N shards plus an index")->capture_default_str();
  gen->add_option("--plant", plants,
                  "MODE=I,J,... with MODE in random|orthogonal|inside|zero_delta and component indices");

  for (auto* sub : {analyze, merge, project, resta, sweep_cmd, score, gen}) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->footer(kFooter);
  }

  try {
    const std::vector<std::string> args = apply_config(raw_args);
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      if (code == 0) return kExitOk;
      err << "Run with --help for usage.\n";
      return kExitUsage;
    }

    if (*score) {
      const double s = safety_score(EvalScores{direct_harm, hexphi});
      fmt::print(out, "{:.2f}\n", s);
      return kExitOk;
    }

    if (*gen) {
      FixtureSpec spec = fspec;
      if (!fixture_spec_path.empty()) {
        json j;
        try {
          j = json::parse(read_file(fixture_spec_path));
        } catch (const json::exception& e) {
          throw FormatError(fixture_spec_path + ": malformed fixture spec: " + e.what());
        }
        spec = FixtureSpec::from_json(j);
        // explicit flags win over the spec file
        if (gen->count("--layers")) spec.num_layers = fspec.num_layers;
        if (gen->count("--d-out")) spec.d_out = fspec.d_out;
        if (gen->count("--d-in")) spec.d_in = fspec.d_in;
        if (gen->count("--lora-rank")) spec.rank = fspec.rank;
        if (gen->count("--lora-alpha")) spec.lora_alpha = fspec.lora_alpha;
        if (gen->count("--modules")) spec.target_modules = fspec.target_modules;
        if (gen->count("--subspace-rank")) spec.subspace_rank = fspec.subspace_rank;
        if (gen->count("--seed")) spec.seed = fspec.seed;
        if (gen->count("--shards")) spec.shards = fspec.shards;
      }
      for (const auto& p : plants) {
        const auto eq = p.find('=');
        if (eq == std::string::npos) throw ValidationError("--plant expects MODE=I,J,..., got '" + p + "'");
        auto mode = parse_planting(p.substr(0, eq));
        if (!mode) throw ValidationError("unknown planting mode '" + p.substr(0, eq) + "'");
        std::stringstream ss(p.substr(eq + 1));
        std::string item;
        while (std::getline(ss, item, ',')) {
          if (item.empty()) continue;
          try {
            spec.plants[std::stoul(item)] = *mode;
          } catch (const std::exception&) {
            throw ValidationError("bad component index '" + item + "' in --plant");
          }
        }
      }
      const Fixture fx = generate_fixture(spec);
      write_fixture(fx, fixture_out);
      fmt::print(out, "wrote fixture with {} layer components to {}\n", fx.fine_tuned.layers.size(),
                 fixture_out);
      return kExitOk;
    }

    const PipelineOptions options = pipeline_options(in);

    if (*analyze) {
      const AdapterBundle ft = load(in.fine_tuned, in, options.profile);
      const auto aligned = SafetensorsWeightSource::open(in.aligned);
      const auto unaligned = SafetensorsWeightSource::open(in.unaligned);
      const MergeReport report = run_analyze(ft, aligned, unaligned, pf.tau, options);
      write_reports(report, in, in.report);
      std::size_t degenerate = 0;
      for (const auto& d : report.decisions) degenerate += d.degenerate ? 1 : 0;
      fmt::print(out, "analyzed {} layers: {} below tau={} ({} degenerate)\n", report.total_count,
                 report.flagged_count, format_real(pf.tau), degenerate);
      return kExitOk;
    }

    if (*merge) {
      const AdapterBundle ft = load(in.fine_tuned, in, options.profile);
      const AdapterBundle safe = load(in.safe, in, options.profile);
      const MergePolicy policy = make_policy(pf, ft.dominant_rank());
      const auto aligned = SafetensorsWeightSource::open(in.aligned);
      const auto unaligned = SafetensorsWeightSource::open(in.unaligned);
      PipelineResult result = run_safemerge(ft, safe, aligned, unaligned, policy, options);
      write_adapter(result.adapter, in.output, options.profile);
      write_reports(result.report, in, report_path(in, "merge_report.json"));
      if (!export_path.empty()) {
        if (base_path.empty()) {
          export_merged_weights(result.adapter, aligned, options.profile, export_path);
        } else {
          export_merged_weights(result.adapter, SafetensorsWeightSource::open(base_path), options.profile,
                                export_path);
        }
      }
      print_summary(out, result.report, "merged");
      return kExitOk;
    }

    if (*project) {
      const AdapterBundle ft = load(in.fine_tuned, in, options.profile);
      const auto aligned = SafetensorsWeightSource::open(in.aligned);
      const auto unaligned = SafetensorsWeightSource::open(in.unaligned);
      PipelineResult result = run_safelora(ft, aligned, unaligned, pf.tau, options);
      write_adapter(result.adapter, in.output, options.profile);
      write_reports(result.report, in, report_path(in, "project_report.json"));
      print_summary(out, result.report, "projected");
      return kExitOk;
    }

    if (*resta) {
      RestaOptions ro;
      ro.alpha = resta_alpha;
      if (dare_density) ro.dare = DareOptions{*dare_density, pf.seed};
      ro.negated = negate == "a" ? NegatedFactor::kA : NegatedFactor::kB;
      if (!(ro.alpha > 0.0)) throw PolicyError("--alpha must be positive");
      const AdapterBundle sft = load(in.fine_tuned, in, options.profile);
      const AdapterBundle harmful = load(in.harmful, in, options.profile);
      if (!pf.rank_mode.empty()) {
        ro.rank_mode = parse_rank_mode(pf.rank_mode, pf.target_rank, Strategy::kLinear, sft.dominant_rank());
      }
      PipelineResult result = run_resta(sft, harmful, ro, options);
      write_adapter(result.adapter, in.output, options.profile);
      write_reports(result.report, in, report_path(in, "resta_report.json"));
      print_summary(out, result.report, "rewrote");
      return kExitOk;
    }

    if (*sweep_cmd) {
      SweepGrid grid;
      grid.taus = taus.empty() ? tau_range(tau_start, tau_stop, tau_step) : taus;
      for (const auto& w : weight_grid) {
        const auto colon = w.find(':');
        if (colon == std::string::npos) throw ValidationError("--weights-grid expects W_F:W_S, got '" + w + "'");
        try {
          grid.weights.emplace_back(std::stod(w.substr(0, colon)), std::stod(w.substr(colon + 1)));
        } catch (const std::exception&) {
          throw ValidationError("bad weight pair '" + w + "'");
        }
      }
      grid.strategies.clear();
      for (const auto& s : strategies) {
        auto parsed = parse_strategy(s);
        if (!parsed) throw ValidationError("unknown strategy '" + s + "'");
        grid.strategies.push_back(*parsed);
      }
      grid.densities = densities;
      grid.seed = pf.seed;
      const AdapterBundle ft = load(in.fine_tuned, in, options.profile);
      const AdapterBundle safe = load(in.safe, in, options.profile);
      if (!pf.rank_mode.empty()) {
        grid.rank_mode = parse_rank_mode(pf.rank_mode, pf.target_rank, Strategy::kLinear, ft.dominant_rank());
      }
      const auto aligned = SafetensorsWeightSource::open(in.aligned);
      const auto unaligned = SafetensorsWeightSource::open(in.unaligned);
      const SweepResult result = sweep(ft, safe, aligned, unaligned, grid, options);
      write_file(in.csv, result.to_csv());
      fmt::print(out, "wrote {} grid rows to {} ({} rho computations)\n", result.rows.size(), in.csv,
                 result.stats.rho_computations);
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace lorasafe::cli
