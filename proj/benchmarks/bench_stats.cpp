#include <benchmark/benchmark.h>

#include "certvote/stats.hpp"

using namespace certvote;

static void BM_inv_norm_cdf(benchmark::State& state) {
  double p = 0.001;
  for (auto _ : state) {
    benchmark::DoNotOptimize(stats::inv_norm_cdf(p));
    p += 0.001;
    if (p >= 0.999) p = 0.001;
  }
}
BENCHMARK(BM_inv_norm_cdf);

static void BM_clopper_pearson(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(stats::clopper_pearson_lower(n - n / 10, n, 0.05));
  }
}
BENCHMARK(BM_clopper_pearson)->Arg(100)->Arg(1000)->Arg(10000);

static void BM_rank_test(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(stats::binom_test_two_sided_half(n - n / 3, n));
  }
}
BENCHMARK(BM_rank_test)->Arg(10)->Arg(50);
