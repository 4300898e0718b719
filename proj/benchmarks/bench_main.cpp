#include <benchmark/benchmark.h>

#include "dpruner/importance.hpp"
#include "dpruner/model.hpp"
#include "dpruner/pruner.hpp"
#include "dpruner/random.hpp"

namespace {

using namespace dpruner;

std::vector<TokenId> tokens(std::size_t n) {
  Rng rng(5);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(uniform_index(rng, 256));
  return out;
}

void BM_Forward(benchmark::State& state) {
  const auto model = init_model(ModelConfig{});
  const auto seq = tokens(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(next_token_loss(model, seq).loss);
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64);

void BM_ForwardBackward(benchmark::State& state) {
  const auto model = init_model(ModelConfig{});
  const auto seq = tokens(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_gradients(model, seq).loss);
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(64);

void BM_SelectPerMatrix(benchmark::State& state) {
  const auto scores = magnitude_scores(init_model(ModelConfig{}));
  for (auto _ : state) benchmark::DoNotOptimize(select_mask_per_matrix(scores, 0.5).zeros());
}
BENCHMARK(BM_SelectPerMatrix);

void BM_SelectBlockedScaled(benchmark::State& state) {
  const auto scores = magnitude_scores(init_model(ModelConfig{}));
  for (auto _ : state) benchmark::DoNotOptimize(select_mask_blocked_scaled(scores, 0.5, 16).zeros());
}
BENCHMARK(BM_SelectBlockedScaled);

}  // namespace

BENCHMARK_MAIN();
