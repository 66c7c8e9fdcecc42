#include "certvote/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "certvote/errors.hpp"

namespace certvote {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "dense") return LayerKind::dense;
  if (name == "relu") return LayerKind::relu;
  if (name == "conv2d") return LayerKind::conv2d;
  if (name == "maxpool2d") return LayerKind::maxpool2d;
  if (name == "dropout") return LayerKind::dropout;
  if (name == "flatten") return LayerKind::flatten;
  throw DataError("unknown layer kind: " + name);
}

Layer Layer::dense(std::size_t in_dim, std::size_t out_dim) {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("dense: zero dimension");
  Layer l;
  l.kind = LayerKind::dense;
  l.in_dim = in_dim;
  l.out_dim = out_dim;
  l.weights = Tensor::zeros({out_dim, in_dim});
  l.bias = Tensor::zeros({out_dim});
  return l;
}

Layer Layer::relu() {
  Layer l;
  l.kind = LayerKind::relu;
  return l;
}

Layer Layer::conv2d(std::size_t kernel_h, std::size_t kernel_w,
                    std::size_t in_channels, std::size_t out_channels) {
  if (kernel_h == 0 || kernel_w == 0 || in_channels == 0 || out_channels == 0) {
    throw ConfigError("conv2d: zero dimension");
  }
  Layer l;
  l.kind = LayerKind::conv2d;
  l.kernel_h = kernel_h;
  l.kernel_w = kernel_w;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.weights = Tensor::zeros({out_channels, in_channels, kernel_h, kernel_w});
  l.bias = Tensor::zeros({out_channels});
  return l;
}

Layer Layer::maxpool2d() {
  Layer l;
  l.kind = LayerKind::maxpool2d;
  return l;
}

Layer Layer::dropout(double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("dropout: keep probability must lie in (0, 1]");
  }
  Layer l;
  l.kind = LayerKind::dropout;
  l.keep_prob = keep_prob;
  return l;
}

Layer Layer::flatten() {
  Layer l;
  l.kind = LayerKind::flatten;
  return l;
}

std::vector<std::size_t> Layer::output_shape(const std::vector<std::size_t>& in) const {
  switch (kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != in_dim) {
        throw ShapeError("dense layer expects flat input of length " +
                         std::to_string(in_dim));
      }
      return {out_dim};
    case LayerKind::relu:
    case LayerKind::dropout:
      return in;
    case LayerKind::conv2d: {
      if (in.size() != 3 || in[0] != in_channels) {
        throw ShapeError("conv2d expects [C, H, W] input with C = " +
                         std::to_string(in_channels));
      }
      if (in[1] < kernel_h || in[2] < kernel_w) {
        throw ShapeError("conv2d input smaller than kernel");
      }
      return {out_channels, in[1] - kernel_h + 1, in[2] - kernel_w + 1};
    }
    case LayerKind::maxpool2d:
      if (in.size() != 3 || in[1] < 2 || in[2] < 2) {
        throw ShapeError("maxpool2d expects [C, H, W] input with H, W >= 2");
      }
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::flatten:
      return {shape_product(in)};
  }
  throw ConfigError("unknown layer kind");
}

void Network::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("network: temperature must be positive");
  if (label_count == 0) throw ConfigError("network: label_count must be positive");
  if (input_shape.empty()) throw ShapeError("network: empty input shape");
  std::vector<std::size_t> shape = input_shape;
  for (const Layer& layer : layers) shape = layer.output_shape(shape);
  if (shape.size() != 1 || shape[0] != label_count) {
    throw ShapeError("network: final pre-softmax dimension must equal label_count");
  }
}

void init_weights(Network& net, std::uint64_t seed) {
  rng::Stream stream(seed);
  for (Layer& layer : net.layers) {
    if (!layer.has_params()) continue;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
    if (layer.kind == LayerKind::dense) {
      fan_in = layer.in_dim;
      fan_out = layer.out_dim;
    } else {
      fan_in = layer.in_channels * layer.kernel_h * layer.kernel_w;
      fan_out = layer.out_channels * layer.kernel_h * layer.kernel_w;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& w : layer.weights.data) {
      w = bound * (2.0 * stream.next_unit() - 1.0);
    }
    for (double& b : layer.bias.data) b = 0.0;
  }
}

namespace {

Tensor dense_forward(const Layer& l, const Tensor& in) {
  Tensor out = Tensor::zeros({l.out_dim});
  for (std::size_t o = 0; o < l.out_dim; ++o) {
    double acc = l.bias[o];
    const double* w = &l.weights.data[o * l.in_dim];
    for (std::size_t i = 0; i < l.in_dim; ++i) acc += w[i] * in[i];
    out[o] = acc;
  }
  return out;
}

Tensor conv2d_forward(const Layer& l, const Tensor& in) {
  const std::size_t h = in.shape[1];
  const std::size_t w = in.shape[2];
  const std::size_t oh = h - l.kernel_h + 1;
  const std::size_t ow = w - l.kernel_w + 1;
  Tensor out = Tensor::zeros({l.out_channels, oh, ow});
  for (std::size_t co = 0; co < l.out_channels; ++co) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = l.bias[co];
        for (std::size_t ci = 0; ci < l.in_channels; ++ci) {
          for (std::size_t u = 0; u < l.kernel_h; ++u) {
            const double* wrow =
                &l.weights.data[((co * l.in_channels + ci) * l.kernel_h + u) * l.kernel_w];
            const double* irow = &in.data[(ci * h + (y + u)) * w + x];
            for (std::size_t v = 0; v < l.kernel_w; ++v) acc += wrow[v] * irow[v];
          }
        }
        out.data[(co * oh + y) * ow + x] = acc;
      }
    }
  }
  return out;
}

Tensor maxpool_forward(const Tensor& in, std::vector<std::size_t>* argmax) {
  const std::size_t c = in.shape[0];
  const std::size_t h = in.shape[1];
  const std::size_t w = in.shape[2];
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best_idx = (ci * h + 2 * y) * w + 2 * x;
        double best = in.data[best_idx];
        for (std::size_t u = 0; u < 2; ++u) {
          for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t idx = (ci * h + 2 * y + u) * w + 2 * x + v;
            if (in.data[idx] > best) {
              best = in.data[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t out_idx = (ci * oh + y) * ow + x;
        out.data[out_idx] = best;
        if (argmax) (*argmax)[out_idx] = best_idx;
      }
    }
  }
  return out;
}

}  // namespace

Tensor forward(const Network& net, const Tensor& x, bool training,
               rng::Stream* stream, ForwardTrace* trace,
               double dropout_keep_override) {
  if (x.shape != net.input_shape) {
    throw ShapeError("forward: input shape " + x.shape_string() +
                     " does not match network input");
  }
  if (trace) {
    trace->activations.clear();
    trace->pool_argmax.assign(net.layers.size(), {});
    trace->dropout_mask.assign(net.layers.size(), {});
    trace->activations.reserve(net.layers.size() + 1);
    trace->activations.push_back(x);
  }

  Tensor cur = x;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Layer& l = net.layers[li];
    switch (l.kind) {
      case LayerKind::dense:
        if (cur.shape.size() != 1 || cur.shape[0] != l.in_dim) {
          throw ShapeError("forward: dense layer input mismatch");
        }
        cur = dense_forward(l, cur);
        break;
      case LayerKind::relu:
        for (double& v : cur.data) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::conv2d:
        l.output_shape(cur.shape);  // shape check
        cur = conv2d_forward(l, cur);
        break;
      case LayerKind::maxpool2d:
        l.output_shape(cur.shape);
        cur = maxpool_forward(cur, trace ? &trace->pool_argmax[li] : nullptr);
        break;
      case LayerKind::dropout: {
        if (!training) break;
        if (!stream) throw ConfigError("forward: dropout training pass needs a stream");
        const double keep =
            dropout_keep_override > 0.0 ? dropout_keep_override : l.keep_prob;
        std::vector<double> mask(cur.size());
        const double scale = 1.0 / keep;
        for (std::size_t i = 0; i < cur.size(); ++i) {
          mask[i] = stream->next_unit() < keep ? scale : 0.0;
          cur.data[i] *= mask[i];
        }
        if (trace) trace->dropout_mask[li] = std::move(mask);
        break;
      }
      case LayerKind::flatten:
        cur = reshape(std::move(cur), {cur.size()});
        break;
    }
    if (trace) trace->activations.push_back(cur);
  }
  return cur;
}

Gradients backward(const Network& net, const ForwardTrace& trace,
                   const Tensor& logit_grad, bool want_param_grads) {
  Gradients g;
  g.weight_grads.resize(net.layers.size());
  g.bias_grads.resize(net.layers.size());

  Tensor grad = logit_grad;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const Layer& l = net.layers[li];
    const Tensor& in = trace.activations[li];
    switch (l.kind) {
      case LayerKind::dense: {
        if (want_param_grads) {
          Tensor dw = Tensor::zeros(l.weights.shape);
          Tensor db = Tensor::zeros(l.bias.shape);
          for (std::size_t o = 0; o < l.out_dim; ++o) {
            const double go = grad[o];
            db[o] = go;
            double* dwrow = &dw.data[o * l.in_dim];
            for (std::size_t i = 0; i < l.in_dim; ++i) dwrow[i] = go * in[i];
          }
          g.weight_grads[li] = std::move(dw);
          g.bias_grads[li] = std::move(db);
        }
        Tensor din = Tensor::zeros(in.shape);
        for (std::size_t o = 0; o < l.out_dim; ++o) {
          const double go = grad[o];
          const double* wrow = &l.weights.data[o * l.in_dim];
          for (std::size_t i = 0; i < l.in_dim; ++i) din[i] += go * wrow[i];
        }
        grad = std::move(din);
        break;
      }
      case LayerKind::relu: {
        Tensor din = grad;
        for (std::size_t i = 0; i < din.size(); ++i) {
          if (in[i] <= 0.0) din[i] = 0.0;
        }
        grad = std::move(din);
        break;
      }
      case LayerKind::conv2d: {
        const std::size_t h = in.shape[1];
        const std::size_t w = in.shape[2];
        const std::size_t oh = h - l.kernel_h + 1;
        const std::size_t ow = w - l.kernel_w + 1;
        Tensor din = Tensor::zeros(in.shape);
        Tensor dw = want_param_grads ? Tensor::zeros(l.weights.shape) : Tensor();
        Tensor db = want_param_grads ? Tensor::zeros(l.bias.shape) : Tensor();
        for (std::size_t co = 0; co < l.out_channels; ++co) {
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
              const double go = grad.data[(co * oh + y) * ow + x];
              if (want_param_grads) db[co] += go;
              for (std::size_t ci = 0; ci < l.in_channels; ++ci) {
                for (std::size_t u = 0; u < l.kernel_h; ++u) {
                  const std::size_t wbase =
                      ((co * l.in_channels + ci) * l.kernel_h + u) * l.kernel_w;
                  const std::size_t ibase = (ci * h + (y + u)) * w + x;
                  for (std::size_t v = 0; v < l.kernel_w; ++v) {
                    din.data[ibase + v] += go * l.weights.data[wbase + v];
                    if (want_param_grads) {
                      dw.data[wbase + v] += go * in.data[ibase + v];
                    }
                  }
                }
              }
            }
          }
        }
        if (want_param_grads) {
          g.weight_grads[li] = std::move(dw);
          g.bias_grads[li] = std::move(db);
        }
        grad = std::move(din);
        break;
      }
      case LayerKind::maxpool2d: {
        Tensor din = Tensor::zeros(in.shape);
        const auto& argmax = trace.pool_argmax[li];
        for (std::size_t i = 0; i < grad.size(); ++i) {
          din.data[argmax[i]] += grad.data[i];
        }
        grad = std::move(din);
        break;
      }
      case LayerKind::dropout: {
        const auto& mask = trace.dropout_mask[li];
        if (!mask.empty()) {
          Tensor din = grad;
          for (std::size_t i = 0; i < din.size(); ++i) din.data[i] *= mask[i];
          grad = std::move(din);
        }
        break;
      }
      case LayerKind::flatten:
        grad = reshape(std::move(grad), in.shape);
        break;
    }
  }
  g.input_grad = std::move(grad);
  return g;
}

Tensor logits(const Network& net, const Tensor& x) {
  Tensor z = forward(net, x, /*training=*/false, nullptr, nullptr);
  assert_finite(z, "logits");
  return z;
}

Tensor layer_output(const Network& net, const Tensor& x, std::size_t layer_index) {
  if (layer_index >= net.layers.size()) {
    throw ConfigError("layer_output: layer index out of range");
  }
  ForwardTrace trace;
  forward(net, x, /*training=*/false, nullptr, &trace);
  return trace.activations[layer_index + 1];
}

std::vector<double> softmax_t(std::span<const double> z, double temperature) {
  if (!(temperature > 0.0)) {
    throw ConfigError("softmax_t: temperature must be positive");
  }
  if (z.empty()) throw ShapeError("softmax_t: empty input");
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> out(z.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp((z[i] - zmax) / temperature);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

Tensor softmax_t(const Tensor& z, double temperature) {
  return Tensor(z.shape, softmax_t(std::span<const double>(z.data), temperature));
}

int argmax_label(std::span<const double> z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i] > z[best]) best = i;
  }
  return static_cast<int>(best);
}

int predict_label(const Network& net, const Tensor& x) {
  const Tensor z = logits(net, x);
  return argmax_label(std::span<const double>(z.data));
}

Tensor input_gradient(const Network& net, const Tensor& x,
                      const LogitObjective& objective) {
  ForwardTrace trace;
  const Tensor z = forward(net, x, /*training=*/false, nullptr, &trace);
  const std::vector<double> gz = objective.grad(std::span<const double>(z.data));
  if (gz.size() != z.size()) {
    throw ShapeError("input_gradient: objective gradient length mismatch");
  }
  Gradients g = backward(net, trace, Tensor(z.shape, gz), /*want_param_grads=*/false);
  assert_finite(g.input_grad, "input_gradient");
  return g.input_grad;
}

LogitObjective logit_coordinate_objective(std::size_t index) {
  LogitObjective obj;
  obj.value = [index](std::span<const double> z) { return z[index]; };
  obj.grad = [index](std::span<const double> z) {
    std::vector<double> g(z.size(), 0.0);
    g[index] = 1.0;
    return g;
  };
  return obj;
}

LogitObjective softmax_coordinate_objective(std::size_t index, double temperature) {
  LogitObjective obj;
  obj.value = [index, temperature](std::span<const double> z) {
    return softmax_t(z, temperature)[index];
  };
  obj.grad = [index, temperature](std::span<const double> z) {
    // d sigma_j / d z_k = (1/T) * sigma_j * (delta_jk - sigma_k)
    const std::vector<double> s = softmax_t(z, temperature);
    std::vector<double> g(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double delta = k == index ? 1.0 : 0.0;
      g[k] = s[index] * (delta - s[k]) / temperature;
    }
    return g;
  };
  return obj;
}

}  // namespace certvote
