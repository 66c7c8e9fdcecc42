#include <doctest.h>

#include <cmath>
#include <numeric>
#include <span>

#include "certvote/errors.hpp"
#include "certvote/model_io.hpp"
#include "certvote/network.hpp"
#include "certvote/train.hpp"
#include "oracles.hpp"

using namespace certvote;

namespace {

Tensor vec(std::vector<double> v) { return Tensor::vector1d(std::move(v)); }

}  // namespace

TEST_SUITE("tensor_net") {

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({0}, {}), ShapeError);
  const Tensor t = Tensor::zeros({2, 3});
  CHECK(t.size() == 6);
}

TEST_CASE("logits: identity and hand arithmetic") {
  const Network id = oracles::identity_network(2);
  const Tensor z = logits(id, vec({0.2, 0.8}));
  CHECK(z[0] == doctest::Approx(0.2));
  CHECK(z[1] == doctest::Approx(0.8));

  Network net;
  net.input_shape = {2};
  net.label_count = 2;
  Layer l = Layer::dense(2, 2);
  l.weights.data = {1.0, 1.0, 0.0, 1.0};  // rows [1,1], [0,1]
  l.bias.data = {0.5, 0.0};
  net.layers.push_back(std::move(l));
  const Tensor z2 = logits(net, vec({1.0, 1.0}));
  CHECK(z2[0] == doctest::Approx(2.5));
  CHECK(z2[1] == doctest::Approx(1.0));
}

TEST_CASE("logits: seeded 2-layer net replayed against a hand-written matmul") {
  Network net;
  net.input_shape = {3};
  net.label_count = 4;
  net.layers.push_back(Layer::dense(3, 5));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(5, 4));
  init_weights(net, 42);

  const Tensor x = vec({0.0, 0.0, 0.0});
  const Tensor z = logits(net, x);

  // Replay by hand: zero input -> first layer output is its bias, then relu,
  // then the second layer.
  const Layer& l0 = net.layers[0];
  const Layer& l2 = net.layers[2];
  std::vector<double> h(5);
  for (std::size_t o = 0; o < 5; ++o) h[o] = std::max(0.0, l0.bias[o]);
  for (std::size_t o = 0; o < 4; ++o) {
    double acc = l2.bias[o];
    for (std::size_t i = 0; i < 5; ++i) acc += l2.weights.data[o * 5 + i] * h[i];
    CHECK(z[o] == doctest::Approx(acc).epsilon(1e-15));
  }
}

TEST_CASE("logits rejects shape mismatches") {
  const Network id = oracles::identity_network(2);
  CHECK_THROWS_AS(logits(id, vec({0.1, 0.2, 0.3})), ShapeError);
}

TEST_CASE("softmax_t: symmetry, shift invariance, temperature identity") {
  const auto half = softmax_t(std::vector<double>{0.0, 0.0}, 1.0);
  CHECK(half[0] == doctest::Approx(0.5));
  CHECK(half[1] == doctest::Approx(0.5));

  const auto thirds = softmax_t(std::vector<double>{3.7, 3.7, 3.7}, 2.5);
  for (double v : thirds) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  const auto hot = softmax_t(std::vector<double>{1.0, 2.0, 3.0}, 10.0);
  const auto scaled = softmax_t(std::vector<double>{0.1, 0.2, 0.3}, 1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(hot[i] == doctest::Approx(scaled[i]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(softmax_t(std::vector<double>{1.0}, 0.0), ConfigError);
  CHECK_THROWS_AS(softmax_t(std::vector<double>{1.0}, -2.0), ConfigError);
}

TEST_CASE("softmax_t properties over random logits") {
  rng::Stream stream(7);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> z(1 + stream.next_below(8));
    for (double& v : z) v = 200.0 * (stream.next_unit() - 0.5);
    const double temperature = 0.1 + 100.0 * stream.next_unit();
    const auto s = softmax_t(z, temperature);

    double sum = 0.0;
    for (double v : s) {
      CHECK(v > 0.0);
      CHECK(v < 1.0 + 1e-15);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);

    // argmax invariance (skip near-ties)
    const auto zmax = std::max_element(z.begin(), z.end());
    bool tied = false;
    for (double v : z) {
      if (&v != &*zmax && std::abs(v - *zmax) < 1e-9) tied = true;
    }
    if (!tied) {
      CHECK(argmax_label(std::span<const double>(s)) ==
            argmax_label(std::span<const double>(z)));
    }

    // temperature identity sigma_T(z) = sigma_1(z/T)
    std::vector<double> zt(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) zt[i] = z[i] / temperature;
    const auto s1 = softmax_t(zt, 1.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::abs(s[i] - s1[i]) < 1e-12);
    }
  }
}

TEST_CASE("input_gradient: basis vector on the identity layer") {
  const Network id = oracles::identity_network(3);
  const Tensor g = input_gradient(id, vec({0.3, 0.5, 0.2}),
                                  logit_coordinate_objective(1));
  CHECK(g[0] == doctest::Approx(0.0));
  CHECK(g[1] == doctest::Approx(1.0));
  CHECK(g[2] == doctest::Approx(0.0));
}

TEST_CASE("input_gradient matches finite differences on random nets") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const Network net = oracles::random_dense_network(6, 9, 4, 1.0 + seed, 100 + seed);
    const Tensor x = oracles::random_unit_tensor({6}, 500 + seed);
    for (std::size_t j = 0; j < 4; j += 2) {
      const LogitObjective obj = softmax_coordinate_objective(j, net.temperature);
      const Tensor g = input_gradient(net, x, obj);
      const Tensor fd = oracles::fd_input_gradient(net, x, obj);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double denom = std::max(1.0, std::abs(g[i]));
        CHECK(std::abs(g[i] - fd[i]) / denom < 1e-4);
      }
    }
  }
}

TEST_CASE("input_gradient matches finite differences through conv and pool") {
  const Network net = oracles::random_conv_network(8, 3, 1.0, 77);
  const Tensor x = oracles::random_unit_tensor({1, 8, 8}, 78);
  const LogitObjective obj = softmax_coordinate_objective(0, 1.0);
  const Tensor g = input_gradient(net, x, obj);
  const Tensor fd = oracles::fd_input_gradient(net, x, obj);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double denom = std::max(1.0, std::abs(g[i]));
    CHECK(std::abs(g[i] - fd[i]) / denom < 1e-4);
  }
}

TEST_CASE("softmax gradient carries the 1/T factor") {
  // With all-equal logits the softmax values match at every temperature, so
  // the gradients differ by exactly the temperature ratio.
  const Network id1 = oracles::identity_network(4, 1.0);
  const Network id10 = oracles::identity_network(4, 10.0);
  const Tensor x = vec({0.4, 0.4, 0.4, 0.4});

  const Tensor g1 = input_gradient(id1, x, softmax_coordinate_objective(2, 1.0));
  const Tensor g10 = input_gradient(id10, x, softmax_coordinate_objective(2, 10.0));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(g1[i] == doctest::Approx(10.0 * g10[i]).epsilon(1e-12));
  }
  // Both ends agree with finite differences.
  const Tensor fd10 =
      oracles::fd_input_gradient(id10, x, softmax_coordinate_objective(2, 10.0));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(g10[i] - fd10[i]) < 1e-8);
  }
}

TEST_CASE("cross_entropy matches the direct softmax log") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const Network net = oracles::random_dense_network(5, 7, 4, 5.0 * seed, 200 + seed);
    const Tensor x = oracles::random_unit_tensor({5}, 300 + seed);
    const Tensor z = logits(net, x);
    const auto probs = softmax_t(std::span<const double>(z.data), net.temperature);
    for (int label = 0; label < 4; ++label) {
      CHECK(cross_entropy(net, x, label) ==
            doctest::Approx(-std::log(probs[static_cast<std::size_t>(label)]))
                .epsilon(1e-10));
    }
  }
}

TEST_CASE("train: zero epochs leaves weights untouched") {
  Network net = oracles::random_dense_network(4, 6, 3, 1.0, 11);
  const std::vector<double> before = net.layers[0].weights.data;
  Dataset ds;
  ds.inputs = {vec({0.1, 0.2, 0.3, 0.4})};
  ds.labels = {1};
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.dropout_keep = 1.0;
  const Network out = train(net, ds, cfg);
  CHECK(out.layers[0].weights.data == before);
}

TEST_CASE("train: empty dataset raises a data error") {
  Network net = oracles::random_dense_network(4, 6, 3, 1.0, 11);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(net, Dataset{}, cfg), DataError);
}

TEST_CASE("train: separable blobs reach 99% training accuracy") {
  const Dataset ds = synth_blobs(2, 100, 4, 0.03, 99);
  Network net;
  net.input_shape = {4};
  net.label_count = 2;
  net.temperature = 1.0;
  net.layers.push_back(Layer::dense(4, 2));
  init_weights(net, 3);

  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.momentum = 0.9;
  cfg.dropout_keep = 1.0;
  cfg.batch_size = 32;
  cfg.epochs = 50;
  cfg.seed = 4;
  const Network trained = train(net, ds, cfg);
  CHECK(accuracy(trained, ds) >= 0.99);
}

TEST_CASE("train: identical seeds give bit-identical weights") {
  const Dataset ds = synth_blobs(3, 40, 5, 0.1, 21);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.dropout_keep = 0.8;
  cfg.seed = 1234;

  auto make = [&] {
    Network net;
    net.input_shape = {5};
    net.label_count = 3;
    net.temperature = 10.0;
    net.layers.push_back(Layer::dense(5, 8));
    net.layers.push_back(Layer::relu());
    net.layers.push_back(Layer::dropout(0.8));
    net.layers.push_back(Layer::dense(8, 3));
    init_weights(net, 5);
    return train(net, ds, cfg);
  };
  const Network a = make();
  const Network b = make();
  for (std::size_t li = 0; li < a.layers.size(); ++li) {
    CHECK(a.layers[li].weights.data == b.layers[li].weights.data);
    CHECK(a.layers[li].bias.data == b.layers[li].bias.data);
  }
}

TEST_CASE("train rejects out-of-range labels") {
  Dataset ds;
  ds.inputs = {vec({0.1, 0.2, 0.3, 0.4})};
  ds.labels = {7};
  Network net = oracles::random_dense_network(4, 6, 3, 1.0, 11);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(net, ds, cfg), DataError);
}

TEST_CASE("model persistence round trip is bit exact") {
  Network net = oracles::random_dense_network(5, 7, 3, 20.0, 8);
  const std::string doc = network_to_json(net);
  const Network back = network_from_json(doc);
  CHECK(back.temperature == net.temperature);
  CHECK(back.input_shape == net.input_shape);
  CHECK(back.layers.size() == net.layers.size());
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    CHECK(back.layers[li].weights.data == net.layers[li].weights.data);
    CHECK(back.layers[li].bias.data == net.layers[li].bias.data);
  }
  // Same logits bit-for-bit on a probe input.
  const Tensor x = oracles::random_unit_tensor({5}, 9);
  const Tensor za = logits(net, x);
  const Tensor zb = logits(back, x);
  CHECK(za.data == zb.data);
}

TEST_CASE("model loader rejects foreign documents") {
  CHECK_THROWS_AS(network_from_json("{}"), DataError);
  CHECK_THROWS_AS(network_from_json("not json"), DataError);
  CHECK_THROWS_AS(
      network_from_json(R"({"format":"other","version":1,"temperature":1,)"
                        R"("label_count":2,"input_shape":[2],"layers":[]})"),
      DataError);
}

}  // TEST_SUITE
