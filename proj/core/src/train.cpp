#include "certvote/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "certvote/errors.hpp"
#include "certvote/rng.hpp"

namespace certvote {

namespace {

double log_sum_exp_over_t(std::span<const double> z, double temperature) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double acc = 0.0;
  for (double v : z) acc += std::exp((v - zmax) / temperature);
  return zmax / temperature + std::log(acc);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("train: momentum must lie in [0, 1)");
  }
  if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) {
    throw ConfigError("train: dropout_keep must lie in (0, 1]");
  }
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (decay < 0.0) throw ConfigError("train: decay must be non-negative");
}

double cross_entropy(const Network& net, const Tensor& x, int label) {
  const Tensor z = logits(net, x);
  const std::span<const double> zs(z.data);
  return log_sum_exp_over_t(zs, net.temperature) -
         z[static_cast<std::size_t>(label)] / net.temperature;
}

double accuracy(const Network& net, const Dataset& data) {
  if (data.size() == 0) throw DataError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predict_label(net, data.inputs[i]) == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

Network train(Network net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  net.validate();
  if (data.size() == 0) throw DataError("train: empty dataset");
  for (int label : data.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= net.label_count) {
      throw DataError("train: label outside [0, label_count)");
    }
  }

  // Momentum buffers per parameterized layer.
  std::vector<Tensor> vel_w(net.layers.size());
  std::vector<Tensor> vel_b(net.layers.size());
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (net.layers[li].has_params()) {
      vel_w[li] = Tensor::zeros(net.layers[li].weights.shape);
      vel_b[li] = Tensor::zeros(net.layers[li].bias.shape);
    }
  }

  rng::Stream shuffle_stream(rng::derive(cfg.seed, 0x5u));
  rng::Stream dropout_stream(rng::derive(cfg.seed, 0x6u));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_stream.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);

      std::vector<Tensor> grad_w(net.layers.size());
      std::vector<Tensor> grad_b(net.layers.size());
      for (std::size_t li = 0; li < net.layers.size(); ++li) {
        if (net.layers[li].has_params()) {
          grad_w[li] = Tensor::zeros(net.layers[li].weights.shape);
          grad_b[li] = Tensor::zeros(net.layers[li].bias.shape);
        }
      }

      for (std::size_t s = start; s < end; ++s) {
        const Tensor& x = data.inputs[order[s]];
        const int label = data.labels[order[s]];
        ForwardTrace trace;
        const Tensor z = forward(net, x, /*training=*/true, &dropout_stream, &trace,
                                 cfg.dropout_keep);
        // d(cross-entropy)/dz = (sigma_T(z) - onehot) / T
        std::vector<double> gz = softmax_t(std::span<const double>(z.data),
                                           net.temperature);
        gz[static_cast<std::size_t>(label)] -= 1.0;
        for (double& v : gz) v *= inv_batch / net.temperature;

        const Gradients g = backward(net, trace, Tensor(z.shape, std::move(gz)),
                                     /*want_param_grads=*/true);
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
          if (!net.layers[li].has_params()) continue;
          for (std::size_t k = 0; k < grad_w[li].size(); ++k) {
            grad_w[li][k] += g.weight_grads[li][k];
          }
          for (std::size_t k = 0; k < grad_b[li].size(); ++k) {
            grad_b[li][k] += g.bias_grads[li][k];
          }
        }
      }

      const double eta =
          cfg.learning_rate / (1.0 + cfg.decay * static_cast<double>(step));
      for (std::size_t li = 0; li < net.layers.size(); ++li) {
        if (!net.layers[li].has_params()) continue;
        Layer& l = net.layers[li];
        for (std::size_t k = 0; k < l.weights.size(); ++k) {
          vel_w[li][k] = cfg.momentum * vel_w[li][k] - eta * grad_w[li][k];
          l.weights[k] += vel_w[li][k];
        }
        for (std::size_t k = 0; k < l.bias.size(); ++k) {
          vel_b[li][k] = cfg.momentum * vel_b[li][k] - eta * grad_b[li][k];
          l.bias[k] += vel_b[li][k];
        }
      }
      ++step;
    }

    for (const Layer& l : net.layers) {
      if (!l.has_params()) continue;
      assert_finite(l.weights, "train");
      assert_finite(l.bias, "train");
    }
  }
  return net;
}

}  // namespace certvote
