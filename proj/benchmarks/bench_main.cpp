// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "mckv/block_analysis.hpp"
#include "mckv/engine.hpp"
#include "mckv/pipeline.hpp"

namespace mckv {
namespace {

std::vector<std::int32_t> random_tokens(std::size_t n, std::uint32_t vocab) {
  std::mt19937_64 rng(11);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = static_cast<std::int32_t>(rng() % vocab);
  return t;
}

void BM_PrefillFull(benchmark::State& state) {
  const auto w = build_model(ModelSpec{});
  const auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), w.spec.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_full(w, tokens));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PrefillFull)->Arg(128)->Arg(512)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_PrefillDocumentWithAttention(benchmark::State& state) {
  const auto w = build_model(ModelSpec{});
  const auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), w.spec.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_document_with_attention(w, "d", tokens));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PrefillDocumentWithAttention)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_PowerLawFit(benchmark::State& state) {
  std::vector<double> series(static_cast<std::size_t>(state.range(0)));
  for (std::size_t k = 0; k < series.size(); ++k) series[k] = 1.0 / static_cast<double>((k + 1) * (k + 1));
  for (auto _ : state) benchmark::DoNotOptimize(fit_power_law(series));
}
BENCHMARK(BM_PowerLawFit)->Arg(64)->Arg(2048);

void BM_Pipeline(benchmark::State& state) {
  PipelineConfig config;
  config.mode = static_cast<RunMode>(state.range(0));
  const auto w = build_model(config.model);
  const auto corpus = generate_corpus(config.corpus);
  for (auto _ : state) benchmark::DoNotOptimize(run_pipeline(config, w, corpus));
  state.SetLabel(to_string(config.mode));
}
BENCHMARK(BM_Pipeline)
    ->Arg(static_cast<int>(RunMode::kSamkv))
    ->Arg(static_cast<int>(RunMode::kFullRecompute))
    ->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace mckv

BENCHMARK_MAIN();
