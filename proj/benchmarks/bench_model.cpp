#include <benchmark/benchmark.h>

#include "toy.hpp"
#include "vlm/adapters.hpp"
#include "vlm/harness.hpp"
#include "vlm/pipeline.hpp"

namespace {

void BM_VisionEncode(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  vlm::Rng rng(1);
  const vlm::VLMModel model(vlm::VLMConfig{}, 1);
  const auto image = vlm::testing::random_image(side, side, rng);
  vlm::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.encode_image(*image));
  state.counters["patches"] = static_cast<double>(model.encode_image(*image).dim(0));
}
BENCHMARK(BM_VisionEncode)->Arg(28)->Arg(112)->Arg(224)->Arg(378)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  vlm::VLMConfig cfg;
  cfg.architecture = static_cast<vlm::Architecture>(state.range(0));
  if (cfg.architecture == vlm::Architecture::kCrossAttention) cfg.lm.cross_attn_every = 1;
  const vlm::VLMModel model(cfg, 2);
  vlm::Rng rng(2);
  const auto doc = vlm::testing::toy_document(rng);
  const auto seq = model.build(doc);
  vlm::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(seq, doc.images));
  state.counters["tokens"] = static_cast<double>(seq.size());
}
BENCHMARK(BM_Forward)
    ->Arg(static_cast<int>(vlm::Architecture::kFullyAutoregressive))
    ->Arg(static_cast<int>(vlm::Architecture::kCrossAttention))
    ->Unit(benchmark::kMillisecond);

// One LoRA optimizer step: forward, backward, AdamW update.
void BM_TrainStep(benchmark::State& state) {
  vlm::VLMModel model(vlm::VLMConfig{}, 3);
  vlm::Rng rng(3);
  vlm::adapters::AdapterSpec spec;
  spec.rank = 8;
  vlm::adapters::apply_named_policy(model, "lora", spec, rng);
  vlm::harness::AdamW opt(model.parameters(), vlm::harness::TrainConfig{});
  const auto doc = vlm::testing::toy_document(rng);
  const auto seq = model.build(doc);
  for (auto _ : state) {
    vlm::backward(model.loss(seq, doc.images));
    opt.step(1e-4);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Pack(benchmark::State& state) {
  vlm::Rng rng(4);
  std::vector<vlm::Document> docs;
  for (int i = 0; i < state.range(0); ++i) docs.push_back(vlm::testing::toy_document(rng));
  for (auto _ : state) benchmark::DoNotOptimize(vlm::pipeline::pack(docs, 512, 64));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Pack)->Arg(64)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
