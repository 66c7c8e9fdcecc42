#include "certvote/model_io.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "certvote/errors.hpp"
#include "certvote/version.hpp"

namespace certvote {

namespace {

using nlohmann::json;

json layer_to_json(const Layer& l) {
  json params = json::object();
  switch (l.kind) {
    case LayerKind::dense:
      params["in_dim"] = l.in_dim;
      params["out_dim"] = l.out_dim;
      break;
    case LayerKind::conv2d:
      params["kernel_h"] = l.kernel_h;
      params["kernel_w"] = l.kernel_w;
      params["in_channels"] = l.in_channels;
      params["out_channels"] = l.out_channels;
      break;
    case LayerKind::dropout:
      params["keep_prob"] = l.keep_prob;
      break;
    default:
      break;
  }
  json j;
  j["kind"] = layer_kind_name(l.kind);
  j["params"] = params;
  j["weights"] = l.weights.data;
  j["bias"] = l.bias.data;
  return j;
}

Layer layer_from_json(const json& j) {
  const LayerKind kind = layer_kind_from_name(j.at("kind").get<std::string>());
  const json& params = j.at("params");
  Layer l;
  switch (kind) {
    case LayerKind::dense:
      l = Layer::dense(params.at("in_dim").get<std::size_t>(),
                       params.at("out_dim").get<std::size_t>());
      break;
    case LayerKind::conv2d:
      l = Layer::conv2d(params.at("kernel_h").get<std::size_t>(),
                        params.at("kernel_w").get<std::size_t>(),
                        params.at("in_channels").get<std::size_t>(),
                        params.at("out_channels").get<std::size_t>());
      break;
    case LayerKind::dropout:
      l = Layer::dropout(params.at("keep_prob").get<double>());
      break;
    case LayerKind::relu:
      l = Layer::relu();
      break;
    case LayerKind::maxpool2d:
      l = Layer::maxpool2d();
      break;
    case LayerKind::flatten:
      l = Layer::flatten();
      break;
  }
  if (l.has_params()) {
    auto weights = j.at("weights").get<std::vector<double>>();
    auto bias = j.at("bias").get<std::vector<double>>();
    if (weights.size() != l.weights.size() || bias.size() != l.bias.size()) {
      throw DataError("model: weight/bias array length mismatch");
    }
    l.weights.data = std::move(weights);
    l.bias.data = std::move(bias);
  }
  return l;
}

}  // namespace

std::string network_to_json(const Network& net) {
  json j;
  j["format"] = kModelFormatName;
  j["version"] = kModelFormatVersion;
  j["temperature"] = net.temperature;
  j["label_count"] = net.label_count;
  j["input_shape"] = net.input_shape;
  json layers = json::array();
  for (const Layer& l : net.layers) layers.push_back(layer_to_json(l));
  j["layers"] = std::move(layers);
  return j.dump();
}

Network network_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model: invalid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kModelFormatName) {
      throw DataError("model: unexpected format tag");
    }
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw DataError("model: unsupported version");
    }
    Network net;
    net.temperature = j.at("temperature").get<double>();
    net.label_count = j.at("label_count").get<std::size_t>();
    net.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
    for (const json& lj : j.at("layers")) net.layers.push_back(layer_from_json(lj));
    net.validate();
    return net;
  } catch (const json::exception& e) {
    throw DataError(std::string("model: missing or mistyped field: ") + e.what());
  }
}

void save_network(const Network& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("model: cannot write " + path);
  out << network_to_json(net) << "\n";
}

Network load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("model: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return network_from_json(buf.str());
}

}  // namespace certvote
