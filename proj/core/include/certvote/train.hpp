#pragma once

#include <cstdint>

#include "certvote/dataset.hpp"
#include "certvote/network.hpp"

namespace certvote {

struct TrainConfig {
  double learning_rate = 0.01;
  double decay = 1e-6;  // multiplicative per-step learning-rate decay
  double momentum = 0.9;
  double dropout_keep = 0.5;  // applied at every dropout layer during training
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Mini-batch gradient descent with classical momentum
// (v <- mu*v - eta*g, w <- w + v) and eta_t = eta0 / (1 + decay * t) over
// global steps t. Cross-entropy on the temperature softmax, evaluated
// through log-sum-exp of z/T. Inverted dropout during training only.
// Deterministic given cfg.seed; the input network's weights are the
// initialization.
Network train(Network net, const Dataset& data, const TrainConfig& cfg);

// Per-sample cross-entropy of the temperature softmax, via log-sum-exp.
double cross_entropy(const Network& net, const Tensor& x, int label);

// Fraction of the dataset whose predicted label matches.
double accuracy(const Network& net, const Dataset& data);

}  // namespace certvote
