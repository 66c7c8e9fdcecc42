#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "certvote/rng.hpp"
#include "certvote/tensor.hpp"

namespace certvote {

enum class LayerKind { dense, relu, conv2d, maxpool2d, dropout, flatten };

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

// One layer of a feedforward classifier. Parameter fields are meaningful
// only for the kind that uses them; weights/bias are empty elsewhere.
struct Layer {
  LayerKind kind = LayerKind::relu;

  // dense
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;

  // conv2d (valid padding, stride 1, channels-first input [C, H, W])
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  // dropout
  double keep_prob = 1.0;

  Tensor weights;
  Tensor bias;

  static Layer dense(std::size_t in_dim, std::size_t out_dim);
  static Layer relu();
  static Layer conv2d(std::size_t kernel_h, std::size_t kernel_w,
                      std::size_t in_channels, std::size_t out_channels);
  static Layer maxpool2d();
  static Layer dropout(double keep_prob);
  static Layer flatten();

  bool has_params() const {
    return kind == LayerKind::dense || kind == LayerKind::conv2d;
  }

  // Output shape for a given input shape; throws ShapeError when the layer
  // cannot consume it.
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const;
};

// Feedforward classifier with an attached softmax temperature. The layer
// list ends at the logits; the temperature softmax is applied on top of
// them and is not a layer of its own.
struct Network {
  std::vector<std::size_t> input_shape;
  std::vector<Layer> layers;
  double temperature = 1.0;
  std::size_t label_count = 10;

  // Checks temperature, layer shape composition, and that the final
  // pre-softmax dimension equals label_count.
  void validate() const;
};

// Glorot-uniform initialization of every parameterized layer, seeded.
void init_weights(Network& net, std::uint64_t seed);

// Cached intermediate state of one forward pass, consumed by backward().
struct ForwardTrace {
  // activations[0] is the input; activations[i + 1] the output of layer i.
  std::vector<Tensor> activations;
  // maxpool argmax positions and dropout masks, indexed by layer.
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<std::vector<double>> dropout_mask;
};

// Forward pass through all layers. `training` enables inverted dropout
// (mask drawn from `stream`, scaled by 1/keep); inference is deterministic.
// `dropout_keep_override` > 0 replaces each dropout layer's keep probability.
Tensor forward(const Network& net, const Tensor& x, bool training,
               rng::Stream* stream, ForwardTrace* trace,
               double dropout_keep_override = 0.0);

struct Gradients {
  std::vector<Tensor> weight_grads;  // indexed by layer; empty tensors where unused
  std::vector<Tensor> bias_grads;
  Tensor input_grad;
};

// Reverse-mode pass. `logit_grad` is dObjective/dLogits; parameter
// gradients are filled only when `want_param_grads` is set.
Gradients backward(const Network& net, const ForwardTrace& trace,
                   const Tensor& logit_grad, bool want_param_grads);

// Pre-softmax output z = G(x); dropout disabled. Throws ShapeError when x
// does not match the network input shape.
Tensor logits(const Network& net, const Tensor& x);

// Output of layers 1..layer_index+1 composed on x (0-based index of the
// last applied layer). The input is consumed as given, without clipping.
Tensor layer_output(const Network& net, const Tensor& x, std::size_t layer_index);

// Temperature softmax with max-subtraction; temperature must be positive.
std::vector<double> softmax_t(std::span<const double> z, double temperature);
Tensor softmax_t(const Tensor& z, double temperature);

// Argmax class of the logits; ties break to the lowest class index.
int argmax_label(std::span<const double> z);
int predict_label(const Network& net, const Tensor& x);

// Scalar objective over the logits, with its gradient. Used to route
// arbitrary penalty functions through reverse-mode backpropagation.
struct LogitObjective {
  std::function<double(std::span<const double>)> value;
  std::function<std::vector<double>(std::span<const double>)> grad;
};

// dObjective/dx via one forward and one reverse pass.
Tensor input_gradient(const Network& net, const Tensor& x,
                      const LogitObjective& objective);

// Objective picking out a single logit coordinate.
LogitObjective logit_coordinate_objective(std::size_t index);
// Objective sigma_T(z)[index] at the given temperature.
LogitObjective softmax_coordinate_objective(std::size_t index, double temperature);

}  // namespace certvote
