#include <benchmark/benchmark.h>

#include "vlm/nn.hpp"
#include "vlm/ops.hpp"

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  vlm::Rng rng(1);
  const auto a = vlm::Tensor::randn({n, n}, 1.0, rng);
  const auto b = vlm::Tensor::randn({n, n}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(vlm::matmul(a, b));
  state.counters["FLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  vlm::Rng rng(2);
  const auto a = vlm::Tensor::randn({n, n}, 1.0, rng, true);
  const auto b = vlm::Tensor::randn({n, n}, 1.0, rng, true);
  for (auto _ : state) vlm::backward(vlm::sum(vlm::matmul(a, b)));
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(16, 128);

// Causal self-attention over T tokens at width 64.
void BM_CausalAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  vlm::Rng rng(3);
  const vlm::MultiHeadAttention attn("bench", 64, 4, rng);
  const auto x = vlm::Tensor::randn({t, 64}, 1.0, rng);
  const auto mask = vlm::Mask::causal(t);
  vlm::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(attn.forward(x, x, &mask));
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * t));
}
BENCHMARK(BM_CausalAttention)->RangeMultiplier(2)->Range(16, 256);

}  // namespace

BENCHMARK_MAIN();
