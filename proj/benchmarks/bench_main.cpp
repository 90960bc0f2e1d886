#include <benchmark/benchmark.h>

#include "stn/tensor.hpp"

#include <random>

namespace {

void fill(std::mt19937_64& rng, stn::Tensor& t) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (auto& v : t.data) v = d(rng);
}

void BM_conv2d_forward(benchmark::State& state) {
  const int C = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  auto in = stn::make_tensor({C, 64, 64});
  auto k = stn::make_tensor({C, C, 3, 3});
  auto b = stn::make_tensor({C});
  fill(rng, *in);
  fill(rng, *k);
  for (auto _ : state) {
    stn::Graph g;
    auto out = g.conv2d(in, k, b, 1, 1);
    benchmark::DoNotOptimize(out->data.data());
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_conv2d_forward)->Arg(8)->Arg(16)->Arg(32);

void BM_conv2d_train_step(benchmark::State& state) {
  const int C = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  auto in = stn::make_tensor({C, 64, 64}, true);
  auto k = stn::make_tensor({C, C, 3, 3}, true);
  auto b = stn::make_tensor({C}, true);
  fill(rng, *in);
  fill(rng, *k);
  for (auto _ : state) {
    in->zero_grad();
    k->zero_grad();
    b->zero_grad();
    stn::Graph g;
    auto loss = g.sum(g.square(g.conv2d(in, k, b, 1, 1)));
    g.backward(loss);
    benchmark::DoNotOptimize(k->grad.data());
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_conv2d_train_step)->Arg(8)->Arg(16);

void BM_correlate(benchmark::State& state) {
  std::mt19937_64 rng(1);
  auto f1 = stn::make_tensor({8, 64, 64});
  auto f2 = stn::make_tensor({8, 64, 64});
  fill(rng, *f1);
  fill(rng, *f2);
  for (auto _ : state) {
    stn::Graph g;
    auto out = g.correlate(f1, f2, static_cast<int>(state.range(0)));
    benchmark::DoNotOptimize(out->data.data());
  }
}
BENCHMARK(BM_correlate)->Arg(2)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
