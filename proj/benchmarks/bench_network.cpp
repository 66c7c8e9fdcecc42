#include <benchmark/benchmark.h>

#include "certvote/network.hpp"
#include "certvote/rng.hpp"

using namespace certvote;

namespace {

Network dense_net(std::size_t in_dim, std::size_t hidden, std::size_t labels) {
  Network net;
  net.input_shape = {in_dim};
  net.label_count = labels;
  net.temperature = 10.0;
  net.layers.push_back(Layer::dense(in_dim, hidden));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(hidden, hidden));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(hidden, labels));
  init_weights(net, 1);
  return net;
}

Network conv_net(std::size_t side) {
  Network net;
  net.input_shape = {1, side, side};
  net.label_count = 10;
  net.temperature = 10.0;
  net.layers.push_back(Layer::conv2d(3, 3, 1, 8));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::conv2d(3, 3, 8, 8));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::maxpool2d());
  net.layers.push_back(Layer::flatten());
  const std::size_t flat = 8 * ((side - 4) / 2) * ((side - 4) / 2);
  net.layers.push_back(Layer::dense(flat, 64));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(64, 10));
  init_weights(net, 2);
  return net;
}

Tensor unit_input(const std::vector<std::size_t>& shape) {
  rng::Stream stream(3);
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = stream.next_unit();
  return t;
}

}  // namespace

static void BM_dense_logits(benchmark::State& state) {
  const Network net = dense_net(static_cast<std::size_t>(state.range(0)), 32, 10);
  const Tensor x = unit_input(net.input_shape);
  for (auto _ : state) {
    benchmark::DoNotOptimize(logits(net, x));
  }
}
BENCHMARK(BM_dense_logits)->Arg(16)->Arg(64)->Arg(256);

static void BM_conv_logits(benchmark::State& state) {
  const Network net = conv_net(static_cast<std::size_t>(state.range(0)));
  const Tensor x = unit_input(net.input_shape);
  for (auto _ : state) {
    benchmark::DoNotOptimize(logits(net, x));
  }
}
BENCHMARK(BM_conv_logits)->Arg(12)->Arg(28);

static void BM_input_gradient(benchmark::State& state) {
  const Network net = dense_net(static_cast<std::size_t>(state.range(0)), 32, 10);
  const Tensor x = unit_input(net.input_shape);
  const LogitObjective obj = softmax_coordinate_objective(0, net.temperature);
  for (auto _ : state) {
    benchmark::DoNotOptimize(input_gradient(net, x, obj));
  }
}
BENCHMARK(BM_input_gradient)->Arg(16)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
