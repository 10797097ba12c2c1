#include "plugnet/layers.hpp"

#include "plugnet/init.hpp"
#include "plugnet/rng.hpp"

namespace plugnet {

// ---------------------------------------------------------------------------
// LayerSpec
// ---------------------------------------------------------------------------

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kConv2dTransposed: return "conv2d_transposed";
    case LayerKind::kMaxPool2d: return "maxpool2d";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kActivation: return "activation";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "dense") return LayerKind::kDense;
  if (name == "conv2d") return LayerKind::kConv2d;
  if (name == "conv2d_transposed") return LayerKind::kConv2dTransposed;
  if (name == "maxpool2d") return LayerKind::kMaxPool2d;
  if (name == "flatten") return LayerKind::kFlatten;
  if (name == "activation") return LayerKind::kActivation;
  throw ConfigError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::dense(std::string id, std::size_t in, std::size_t out) {
  LayerSpec s;
  s.id = std::move(id);
  s.kind = LayerKind::kDense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::conv2d(std::string id, std::size_t in_ch,
                            std::size_t out_ch, std::size_t kernel,
                            std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.id = std::move(id);
  s.kind = LayerKind::kConv2d;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::conv2d_transposed(std::string id, std::size_t in_ch,
                                       std::size_t out_ch, std::size_t kernel,
                                       std::size_t stride,
                                       std::size_t padding) {
  LayerSpec s = conv2d(std::move(id), in_ch, out_ch, kernel, stride, padding);
  s.kind = LayerKind::kConv2dTransposed;
  return s;
}

LayerSpec LayerSpec::maxpool2d(std::string id, std::size_t window,
                               std::size_t stride) {
  LayerSpec s;
  s.id = std::move(id);
  s.kind = LayerKind::kMaxPool2d;
  s.kernel = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::flatten(std::string id) {
  LayerSpec s;
  s.id = std::move(id);
  s.kind = LayerKind::kFlatten;
  return s;
}

LayerSpec LayerSpec::activation(std::string id, Activation act) {
  LayerSpec s;
  s.id = std::move(id);
  s.kind = LayerKind::kActivation;
  s.act = act;
  return s;
}

bool LayerSpec::has_params() const {
  return kind == LayerKind::kDense || kind == LayerKind::kConv2d ||
         kind == LayerKind::kConv2dTransposed;
}

void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"id", s.id}, {"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LayerKind::kDense:
      j["in"] = s.in_features;
      j["out"] = s.out_features;
      break;
    case LayerKind::kConv2d:
    case LayerKind::kConv2dTransposed:
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["padding"] = s.padding;
      break;
    case LayerKind::kMaxPool2d:
      j["window"] = s.kernel;
      j["stride"] = s.stride;
      break;
    case LayerKind::kFlatten:
      break;
    case LayerKind::kActivation:
      j["activation"] = to_string(s.act);
      break;
  }
}

void from_json(const nlohmann::json& j, LayerSpec& s) {
  s = LayerSpec{};
  s.id = j.at("id").get<std::string>();
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (s.kind) {
    case LayerKind::kDense:
      s.in_features = j.value("in", std::size_t{0});
      s.out_features = j.at("out").get<std::size_t>();
      break;
    case LayerKind::kConv2d:
    case LayerKind::kConv2dTransposed:
      s.in_channels = j.at("in_channels").get<std::size_t>();
      s.out_channels = j.at("out_channels").get<std::size_t>();
      s.kernel = j.at("kernel").get<std::size_t>();
      s.stride = j.value("stride", std::size_t{1});
      s.padding = j.value("padding", std::size_t{0});
      break;
    case LayerKind::kMaxPool2d:
      s.kernel = j.at("window").get<std::size_t>();
      s.stride = j.value("stride", s.kernel);
      break;
    case LayerKind::kFlatten:
      break;
    case LayerKind::kActivation:
      s.act = parse_activation(j.at("activation").get<std::string>());
      break;
  }
}

std::string to_string(Site site) {
  return site == Site::kLinearPreactivation ? "linear_preactivation"
                                            : "conv_channelwise";
}

Site parse_site(const std::string& name) {
  if (name == "linear_preactivation") return Site::kLinearPreactivation;
  if (name == "conv_channelwise") return Site::kConvChannelwise;
  throw ConfigError("unknown attachment site '" + name + "'");
}

// ---------------------------------------------------------------------------
// BaseNetwork
// ---------------------------------------------------------------------------

namespace {

// Output shape of `layer` applied to `in`, or a message describing why the
// layer cannot consume `in`.
Shape infer_shape(LayerSpec& layer, const Shape& in, std::string& why) {
  switch (layer.kind) {
    case LayerKind::kDense: {
      if (in.size() != 1) {
        why = "dense expects a vector, got " + shape_str(in);
        return {};
      }
      if (layer.in_features == 0) layer.in_features = in[0];
      if (layer.in_features != in[0]) {
        why = "expects " + std::to_string(layer.in_features) + " inputs, got " +
              std::to_string(in[0]);
        return {};
      }
      if (layer.out_features == 0) {
        why = "dense layer needs out >= 1";
        return {};
      }
      return {layer.out_features};
    }
    case LayerKind::kConv2d:
    case LayerKind::kConv2dTransposed: {
      if (in.size() != 3 || in[0] != layer.in_channels) {
        why = "expects [" + std::to_string(layer.in_channels) +
              ",H,W], got " + shape_str(in);
        return {};
      }
      if (layer.out_channels == 0 || layer.kernel == 0) {
        why = "conv layer needs out_channels and kernel >= 1";
        return {};
      }
      const ConvParams p{layer.stride, layer.padding};
      try {
        if (layer.kind == LayerKind::kConv2d) {
          return {layer.out_channels, conv_out_size(in[1], layer.kernel, p),
                  conv_out_size(in[2], layer.kernel, p)};
        }
        return {layer.out_channels,
                conv_transposed_out_size(in[1], layer.kernel, p),
                conv_transposed_out_size(in[2], layer.kernel, p)};
      } catch (const Error& e) {
        why = e.what();
        return {};
      }
    }
    case LayerKind::kMaxPool2d: {
      if (in.size() != 3) {
        why = "maxpool2d expects [C,H,W], got " + shape_str(in);
        return {};
      }
      try {
        const ConvParams p{layer.stride, 0};
        return {in[0], conv_out_size(in[1], layer.kernel, p),
                conv_out_size(in[2], layer.kernel, p)};
      } catch (const Error& e) {
        why = e.what();
        return {};
      }
    }
    case LayerKind::kFlatten:
      return {shape_numel(in)};
    case LayerKind::kActivation:
      return in;
  }
  why = "unknown layer kind";
  return {};
}

}  // namespace

template <typename T>
BaseNetwork<T>::BaseNetwork(std::vector<LayerSpec> layers, Shape input_shape)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)) {
  if (layers_.empty()) throw Error("network spec is empty");
  if (input_shape_.empty() || shape_numel(input_shape_) == 0) {
    throw Error("invalid input shape " + shape_str(input_shape_));
  }
  std::map<std::string, std::size_t> seen;
  Shape current = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerSpec& layer = layers_[i];
    if (layer.id.empty()) throw Error("layer " + std::to_string(i) + " has no id");
    if (!seen.emplace(layer.id, i).second) {
      throw Error("duplicate layer id '" + layer.id + "'");
    }
    std::string why;
    Shape next = infer_shape(layer, current, why);
    if (next.empty()) {
      const std::string prev = i == 0 ? "input" : layers_[i - 1].id;
      throw Error("shape mismatch between " + prev + " and " + layer.id +
                  " (" + why + ")");
    }
    shapes_.push_back(next);
    std::vector<TensorT> p;
    if (layer.kind == LayerKind::kDense) {
      p.push_back(TensorT::zeros({layer.out_features, layer.in_features}, true));
      p.push_back(TensorT::zeros({layer.out_features}, true));
    } else if (layer.kind == LayerKind::kConv2d) {
      p.push_back(TensorT::zeros(
          {layer.out_channels, layer.in_channels, layer.kernel, layer.kernel},
          true));
      p.push_back(TensorT::zeros({layer.out_channels}, true));
    } else if (layer.kind == LayerKind::kConv2dTransposed) {
      p.push_back(TensorT::zeros(
          {layer.in_channels, layer.out_channels, layer.kernel, layer.kernel},
          true));
      p.push_back(TensorT::zeros({layer.out_channels}, true));
    }
    params_.push_back(std::move(p));
    current = std::move(next);
  }
}

template <typename T>
std::size_t BaseNetwork<T>::layer_index(const std::string& id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].id == id) return i;
  throw Error("unknown layer id '" + id + "'");
}

template <typename T>
AttachmentPoint BaseNetwork<T>::attachment(const std::string& layer_id) const {
  const std::size_t i = layer_index(layer_id);
  const LayerSpec& layer = layers_[i];
  if (layer.kind == LayerKind::kDense) {
    return {layer_id, Site::kLinearPreactivation, layer.out_features};
  }
  if (layer.kind == LayerKind::kConv2d ||
      layer.kind == LayerKind::kConv2dTransposed) {
    return {layer_id, Site::kConvChannelwise, layer.out_channels};
  }
  throw Error("layer '" + layer_id + "' (" + to_string(layer.kind) +
              ") has no pre-activation output to attach to");
}

template <typename T>
void BaseNetwork<T>::validate(const AttachmentPoint& point) const {
  const AttachmentPoint expected = attachment(point.layer_id);
  if (point.site != expected.site) {
    throw Error("site " + to_string(point.site) + " is not valid on layer '" +
                point.layer_id + "'");
  }
  if (point.width != expected.width) {
    throw Error("attachment width " + std::to_string(point.width) +
                " does not match layer '" + point.layer_id + "' width " +
                std::to_string(expected.width));
  }
}

template <typename T>
void BaseNetwork<T>::freeze() {
  frozen_ = true;
  for (auto& layer : params_)
    for (auto& p : layer) {
      p.set_requires_grad(false);
      p.clear_grad();
    }
}

template <typename T>
std::vector<NamedParam<T>> BaseNetwork<T>::parameters() {
  if (frozen_) throw Error("network is frozen; parameters are read-only");
  std::vector<NamedParam<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (params_[i].empty()) continue;
    out.push_back({layers_[i].id + ".weight", &params_[i][0]});
    out.push_back({layers_[i].id + ".bias", &params_[i][1]});
  }
  return out;
}

template <typename T>
std::size_t BaseNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : params_)
    for (const auto& p : layer) n += p.size();
  return n;
}

template <typename T>
Var<T> BaseNetwork<T>::apply_layer(Tape<T>& tape, std::size_t i,
                                   Var<T> h) const {
  const LayerSpec& layer = layers_[i];
  tape.note_layer(layer.id);
  switch (layer.kind) {
    case LayerKind::kDense:
      return linear(h, tape.leaf(params_[i][0]), tape.leaf(params_[i][1]));
    case LayerKind::kConv2d:
      return conv2d(h, tape.leaf(params_[i][0]), tape.leaf(params_[i][1]),
                    ConvParams{layer.stride, layer.padding});
    case LayerKind::kConv2dTransposed: {
      Var<T> y = conv2d_transposed(h, tape.leaf(params_[i][0]),
                                   ConvParams{layer.stride, layer.padding});
      return add_channel_bias(y, tape.leaf(params_[i][1]));
    }
    case LayerKind::kMaxPool2d:
      return maxpool2d(h, layer.kernel, layer.stride);
    case LayerKind::kFlatten:
      return reshape(h, shapes_[i]);
    case LayerKind::kActivation:
      return activation(h, layer.act);
  }
  throw Error("unknown layer kind");
}

template <typename T>
Var<T> BaseNetwork<T>::forward(Tape<T>& tape, Var<T> x,
                               const Hook& hook) const {
  if (x.value().shape() != input_shape_) {
    throw Error("input shape " + shape_str(x.value().shape()) +
                " does not match network input " + shape_str(input_shape_));
  }
  return forward_range(tape, x, 0, layers_.size(), hook);
}

template <typename T>
Var<T> BaseNetwork<T>::forward_range(Tape<T>& tape, Var<T> h,
                                     std::size_t begin, std::size_t end,
                                     const Hook& hook) const {
  if (begin > end || end > layers_.size()) throw Error("invalid layer range");
  for (std::size_t i = begin; i < end; ++i) {
    h = apply_layer(tape, i, h);
    if (hook && layers_[i].attachable()) h = hook(i, h);
  }
  return h;
}

template <typename T>
BasicTensor<T> BaseNetwork<T>::forward(const TensorT& x) const {
  Tape<T> tape;
  return forward(tape, tape.constant(x)).value();
}

template class BaseNetwork<float>;
template class BaseNetwork<double>;

template <typename T>
BaseNetwork<T> build_base_network(std::vector<LayerSpec> spec,
                                  Shape input_shape, std::uint64_t seed) {
  BaseNetwork<T> net(std::move(spec), std::move(input_shape));
  Rng rng(derive_seed(seed, "base-init"));
  for (std::size_t i = 0; i < net.layers_.size(); ++i) {
    const LayerSpec& l = net.layers_[i];
    if (!l.has_params()) continue;
    auto& w = net.params_[i][0];
    Tensor init;
    if (l.kind == LayerKind::kDense) {
      init = xavier_init(l.out_features, l.in_features, rng);
    } else {
      const std::size_t k2 = l.kernel * l.kernel;
      init = xavier_init(w.shape(), l.in_channels * k2, l.out_channels * k2,
                         rng);
    }
    BasicTensor<T> cast = init.template cast<T>();
    cast.set_requires_grad(true);
    w = std::move(cast);
  }
  return net;
}

template BaseNetwork<float> build_base_network<float>(std::vector<LayerSpec>,
                                                      Shape, std::uint64_t);
template BaseNetwork<double> build_base_network<double>(std::vector<LayerSpec>,
                                                        Shape, std::uint64_t);

BaseNetwork<float> network_from_payload(std::vector<LayerSpec> spec,
                                        Shape input_shape,
                                        const std::vector<float>& payload) {
  BaseNetwork<float> net(std::move(spec), std::move(input_shape));
  if (payload.size() != net.parameter_count()) {
    throw Error("payload length mismatch: expected " +
                std::to_string(net.parameter_count()) + " values, got " +
                std::to_string(payload.size()));
  }
  std::size_t offset = 0;
  for (auto& layer : net.params_)
    for (auto& p : layer) {
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                  p.size(), p.values().begin());
      offset += p.size();
    }
  net.freeze();
  return net;
}

std::vector<float> network_payload(const BaseNetwork<float>& net) {
  std::vector<float> out;
  out.reserve(net.parameter_count());
  for (std::size_t i = 0; i < net.layers().size(); ++i)
    for (const auto& p : net.layer_params(i))
      out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

template <typename T>
ForwardResult<T> forward_base(const BaseNetwork<T>& net,
                              const BasicTensor<T>& x,
                              const std::vector<AttachmentPoint>& capture) {
  std::map<std::size_t, std::string> wanted;
  for (const auto& point : capture) {
    net.validate(point);
    wanted[net.layer_index(point.layer_id)] = point.layer_id;
  }
  ForwardResult<T> result;
  Tape<T> tape;
  auto hook = [&](std::size_t layer, Var<T> z) {
    auto it = wanted.find(layer);
    if (it != wanted.end()) result.captured[it->second] = z.value();
    return z;
  };
  Var<T> out = wanted.empty()
                   ? net.forward(tape, tape.constant(x))
                   : net.forward(tape, tape.constant(x), hook);
  result.output = out.value();
  return result;
}

template ForwardResult<float> forward_base(const BaseNetwork<float>&,
                                           const Tensor&,
                                           const std::vector<AttachmentPoint>&);
template ForwardResult<double> forward_base(
    const BaseNetwork<double>&, const TensorD&,
    const std::vector<AttachmentPoint>&);

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

std::vector<LayerSpec> toy_cls_layers(const Shape& input_shape,
                                      std::size_t outputs) {
  if (input_shape.size() != 3) {
    throw ConfigError("toy-cls expects a [C,H,W] input, got " +
                      shape_str(input_shape));
  }
  const std::size_t c = input_shape[0];
  return {
      LayerSpec::conv2d("conv1", c, 8, 3, 1, 1),
      LayerSpec::activation("relu1", Activation::kRelu),
      LayerSpec::conv2d("conv2", 8, 16, 3, 1, 1),
      LayerSpec::activation("relu2", Activation::kRelu),
      LayerSpec::maxpool2d("pool", 2, 2),
      LayerSpec::flatten("flatten"),
      LayerSpec::dense("fc1", 0, 64),
      LayerSpec::activation("relu3", Activation::kRelu),
      LayerSpec::dense("fc2", 64, 64),
      LayerSpec::activation("relu4", Activation::kRelu),
      LayerSpec::dense("fc3", 64, outputs),
  };
}

std::vector<LayerSpec> toy_fcn_layers(const Shape& input_shape,
                                      std::size_t classes) {
  if (input_shape.size() != 3 || input_shape[1] % 2 || input_shape[2] % 2) {
    throw ConfigError("toy-fcn expects a [C,H,W] input with even H and W, got " +
                      shape_str(input_shape));
  }
  const std::size_t c = input_shape[0];
  return {
      LayerSpec::conv2d("conv1", c, 8, 3, 1, 1),
      LayerSpec::activation("relu1", Activation::kRelu),
      LayerSpec::conv2d("conv2", 8, 16, 3, 2, 1),
      LayerSpec::activation("relu2", Activation::kRelu),
      LayerSpec::conv2d("conv3", 16, 16, 3, 1, 1),
      LayerSpec::activation("relu3", Activation::kRelu),
      LayerSpec::conv2d_transposed("deconv1", 16, 16, 3, 1, 1),
      LayerSpec::activation("relu4", Activation::kRelu),
      LayerSpec::conv2d_transposed("deconv2", 16, classes, 4, 2, 1),
  };
}

std::vector<LayerSpec> architecture_layers(const std::string& name,
                                           const Shape& input_shape,
                                           std::size_t outputs) {
  if (name == "toy-cls") return toy_cls_layers(input_shape, outputs);
  if (name == "toy-fcn") return toy_fcn_layers(input_shape, outputs);
  throw ConfigError("unknown base architecture '" + name + "'");
}

}  // namespace plugnet
