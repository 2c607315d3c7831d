#include <benchmark/benchmark.h>

#include "moestack/ops.hpp"

using namespace moestack;

static void BM_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = Tensor::uniform({n, n}, -1.0f, 1.0f, rng);
  Tensor b = Tensor::uniform({n, n}, -1.0f, 1.0f, rng);
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::matmul(a, b).ptr());
  }
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_batched_contract(benchmark::State& state) {
  Rng rng(1);
  const int64_t t = state.range(0);
  Tensor x = Tensor::uniform({t, 64}, -1.0f, 1.0f, rng);
  Tensor a = Tensor::uniform({4, 16, 64}, -0.1f, 0.1f, rng);
  Tensor b = Tensor::uniform({4, 64, 16}, -0.1f, 0.1f, rng);
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::batched_contract(x, a, b, 4.0f).ptr());
  }
}
BENCHMARK(BM_batched_contract)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
