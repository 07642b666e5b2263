// OpenMP kernels against their serial references.

#include <benchmark/benchmark.h>
#include <omp.h>

#include "blelab/detection.hpp"
#include "blelab/harness.hpp"
#include "blelab/pairing.hpp"

namespace {

using namespace blelab;

void BM_DetectorMonteCarlo_Serial(benchmark::State& state) {
  const detection::GaussianStreamModel model;
  const detection::DetectorConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(detection::evaluate_serial(model, config, static_cast<int>(state.range(0)), 1));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_DetectorMonteCarlo_OpenMP(benchmark::State& state) {
  const detection::GaussianStreamModel model;
  const detection::DetectorConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(detection::evaluate(model, config, static_cast<int>(state.range(0)), 1));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
  state.counters["threads"] = omp_get_max_threads();
}

pairing::PairingTranscript passkey_transcript(std::uint32_t passkey) {
  std::mt19937_64 rng(7);
  pairing::PairingOptions opts;
  opts.initiator_passkey = passkey;
  return pairing::run_pairing(pairing::IoCapability::kKeyboardOnly, pairing::IoCapability::kDisplayOnly,
                              pairing::PairingMode::kLegacyLE, {pairing::Method::kPasskey, true}, rng, opts)
      .transcript;
}

void BM_PasskeySearch_Serial(benchmark::State& state) {
  const auto t = passkey_transcript(static_cast<std::uint32_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pairing::search_passkey_serial(t));
}

void BM_PasskeySearch_OpenMP(benchmark::State& state) {
  const auto t = passkey_transcript(static_cast<std::uint32_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pairing::search_passkey(t));
  state.counters["threads"] = omp_get_max_threads();
}

void BM_ScenarioMonteCarlo_Serial(benchmark::State& state) {
  const harness::ScenarioConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(harness::montecarlo_metrics_serial(config, static_cast<int>(state.range(0)), 1));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ScenarioMonteCarlo_OpenMP(benchmark::State& state) {
  const harness::ScenarioConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(harness::montecarlo_metrics(config, static_cast<int>(state.range(0)), 1));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
  state.counters["threads"] = omp_get_max_threads();
}

}  // namespace

BENCHMARK(BM_DetectorMonteCarlo_Serial)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DetectorMonteCarlo_OpenMP)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PasskeySearch_Serial)->Arg(999'999)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PasskeySearch_OpenMP)->Arg(999'999)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScenarioMonteCarlo_Serial)->Arg(200)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScenarioMonteCarlo_OpenMP)->Arg(200)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
