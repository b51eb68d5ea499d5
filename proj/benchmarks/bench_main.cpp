#include <benchmark/benchmark.h>

#include <random>

#include "tdt/ops.hpp"
#include "tdt/trainer.hpp"

using namespace tdt;

namespace {

ad::Tensor random_tensor(ad::Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(ad::numel_of(s));
  for (auto& x : v) x = n(rng);
  return ad::Tensor::from(std::move(s), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto x = random_tensor({32, 24, n}, 1);
  auto w = random_tensor({n, n}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ad::matmul(x, w));
  }
  state.SetItemsProcessed(state.iterations() * 32 * 24 * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128);

void BM_Attention(benchmark::State& state) {
  const auto seq = static_cast<std::size_t>(state.range(0));
  auto q = random_tensor({32, seq, 64}, 3), k = random_tensor({32, seq, 64}, 4), v = random_tensor({32, seq, 64}, 5);
  std::vector<double> mask(32 * seq, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ad::multi_head_attention(q, k, v, mask, 4));
  }
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(32);

void BM_TrainSteps(benchmark::State& state) {
  data::TaskSpec spec;
  auto corpus = data::generate_corpus(spec, {512, 64, 1, 1}, 0);
  objective::TDTConfig tdt;
  if (state.range(0) == 0) tdt.alpha = tdt.beta = 0.0;
  train::TrainConfig cfg;
  cfg.total_steps = 10;
  cfg.warmup_steps = 0;
  cfg.eval_interval = 0;
  for (auto _ : state) benchmark::DoNotOptimize(train::train(corpus.train, corpus.dev, model::ModelConfig{}, tdt, cfg));
  state.SetLabel(state.range(0) == 0 ? "vanilla, 10 steps" : "tdt, 10 steps");
}
BENCHMARK(BM_TrainSteps)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
