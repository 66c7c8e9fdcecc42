#include <benchmark/benchmark.h>

#include "certvote/certify.hpp"
#include "certvote/ensemble.hpp"
#include "certvote/rng.hpp"

using namespace certvote;

namespace {

Ensemble small_ensemble(std::size_t members) {
  Ensemble ens;
  ens.label_count = 10;
  for (std::size_t l = 0; l < members; ++l) {
    Network net;
    net.input_shape = {16};
    net.label_count = 10;
    net.temperature = 10.0 * (l + 1);
    net.layers.push_back(Layer::dense(16, 32));
    net.layers.push_back(Layer::relu());
    net.layers.push_back(Layer::dense(32, 10));
    init_weights(net, 100 + l);
    ens.members.push_back(std::move(net));
  }
  return ens;
}

Tensor probe() {
  rng::Stream stream(7);
  Tensor t = Tensor::zeros({16});
  for (double& v : t.data) v = stream.next_unit();
  return t;
}

}  // namespace

static void BM_vote(benchmark::State& state) {
  const Ensemble ens = small_ensemble(static_cast<std::size_t>(state.range(0)));
  const Tensor x = probe();
  for (auto _ : state) {
    benchmark::DoNotOptimize(vote(ens, x));
  }
}
BENCHMARK(BM_vote)->Arg(5)->Arg(25)->Arg(50);

static void BM_noisy_query(benchmark::State& state) {
  const Ensemble ens = small_ensemble(static_cast<std::size_t>(state.range(0)));
  const Tensor x = probe();
  QueryPolicy policy;
  policy.noise_sigma = 0.1;
  policy.seed = 9;
  std::uint64_t id = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(noisy_query(ens, x, policy, id++));
  }
}
BENCHMARK(BM_noisy_query)->Arg(5)->Arg(25);

static void BM_certify(benchmark::State& state) {
  const Ensemble ens = small_ensemble(5);
  const Tensor x = probe();
  CertifyConfig cfg;
  cfg.sigma = 0.1;
  cfg.n = static_cast<int>(state.range(0));
  cfg.alpha = 0.05;
  cfg.seed = 11;
  for (auto _ : state) {
    benchmark::DoNotOptimize(certify(ens, x, cfg));
  }
}
BENCHMARK(BM_certify)->Unit(benchmark::kMillisecond)->Arg(100)->Arg(1000);
