// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <cstddef>
#include <string>

#include "lorasafe/linalg.hpp"
#include "lorasafe/merging.hpp"
#include "lorasafe/rng.hpp"
#include "lorasafe/subspace.hpp"

namespace {

using lorasafe::Matrix;

Matrix noise(std::size_t rows, std::size_t cols, std::uint64_t seed, const std::string& tag) {
  const lorasafe::KeyedStream stream(seed, "bench", tag);
  Matrix m(rows, cols);
  auto v = m.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(stream.uniform(i) - 0.5);
  return m;
}

lorasafe::LoraLayer layer(std::size_t d, std::size_t r, const std::string& tag) {
  lorasafe::LoraLayer l;
  l.key = "bench";
  l.A = noise(r, d, 1, tag + ".A");
  l.B = noise(d, r, 1, tag + ".B");
  l.lora_alpha = 2.0 * static_cast<double>(r);
  return l;
}

void BM_CosineScore(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const lorasafe::SubspaceOperator op("bench", noise(d, d, 7, "V"));
  const auto f = layer(d, 8, "ft").factors();
  for (auto _ : state) benchmark::DoNotOptimize(op.cosine_score(f));
}
BENCHMARK(BM_CosineScore)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_MergeLinearConcat(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto f = layer(d, 8, "ft");
  const auto s = layer(d, 8, "safe");
  lorasafe::MergePolicy p;
  for (auto _ : state) benchmark::DoNotOptimize(lorasafe::merge_layers(f, s, p));
}
BENCHMARK(BM_MergeLinearConcat)->Arg(1024)->Unit(benchmark::kMicrosecond);

void BM_TruncatedSvd(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto f = layer(d, 16, "ft").factors();
  for (auto _ : state) benchmark::DoNotOptimize(lorasafe::truncated_svd_of_factors(f, 8));
}
BENCHMARK(BM_TruncatedSvd)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_DenseMergeDare(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto f = layer(d, 8, "ft");
  const auto s = layer(d, 8, "safe");
  lorasafe::MergePolicy p;
  p.strategy = lorasafe::Strategy::kDareLinear;
  p.density = 0.5;
  p.rank_mode = lorasafe::RankMode::dense();
  for (auto _ : state) benchmark::DoNotOptimize(lorasafe::merge_layers(f, s, p));
}
BENCHMARK(BM_DenseMergeDare)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
