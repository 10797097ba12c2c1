#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plugnet/autodiff.hpp"
#include "plugnet/tensor.hpp"

namespace plugnet {

enum class LayerKind {
  kDense,
  kConv2d,
  kConv2dTransposed,
  kMaxPool2d,
  kFlatten,
  kActivation,
};

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kDense;
  // dense; in_features == 0 means "infer from the previous layer"
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // conv2d / conv2d_transposed / maxpool2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // activation
  Activation act = Activation::kIdentity;

  static LayerSpec dense(std::string id, std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::string id, std::size_t in_ch, std::size_t out_ch,
                          std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec conv2d_transposed(std::string id, std::size_t in_ch,
                                     std::size_t out_ch, std::size_t kernel,
                                     std::size_t stride = 1,
                                     std::size_t padding = 0);
  static LayerSpec maxpool2d(std::string id, std::size_t window,
                             std::size_t stride);
  static LayerSpec flatten(std::string id);
  static LayerSpec activation(std::string id, Activation act);

  bool has_params() const;
  // Layers whose output is a pre-activation value a plugin may modulate.
  bool attachable() const { return has_params(); }
};

void to_json(nlohmann::json& j, const LayerSpec& spec);
void from_json(const nlohmann::json& j, LayerSpec& spec);

enum class Site { kLinearPreactivation, kConvChannelwise };

std::string to_string(Site site);
Site parse_site(const std::string& name);

struct AttachmentPoint {
  std::string layer_id;
  Site site = Site::kLinearPreactivation;
  // n for a dense layer, channel count c for a conv layer
  std::size_t width = 0;

  bool operator==(const AttachmentPoint&) const = default;
};

template <typename T>
class BaseNetwork;

/// Validates the shape chain and initializes weights with Xavier uniform and
/// biases with zeros.
template <typename T = float>
BaseNetwork<T> build_base_network(std::vector<LayerSpec> spec,
                                  Shape input_shape, std::uint64_t seed);

template <typename T>
struct NamedParam {
  std::string name;
  BasicTensor<T>* tensor;
};

/// Feed-forward base model F(x; w): an ordered list of layers with their
/// parameters. Shapes are validated when the network is constructed.
///
/// Once frozen, parameters are never handed out mutably and are recorded on
/// tapes as constants, so no gradient is ever allocated for them.
template <typename T>
class BaseNetwork {
 public:
  using TensorT = BasicTensor<T>;
  // Called with the index and pre-activation output of each attachable layer;
  // the returned value replaces that output for the rest of the pass.
  using Hook = std::function<Var<T>(std::size_t layer, Var<T> z)>;

  // Parameters start at zero; see build_base_network for initialization.
  BaseNetwork(std::vector<LayerSpec> layers, Shape input_shape);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return shapes_.back(); }
  std::size_t output_dim() const { return shape_numel(output_shape()); }
  const Shape& layer_output_shape(std::size_t i) const { return shapes_.at(i); }

  std::size_t layer_index(const std::string& id) const;
  AttachmentPoint attachment(const std::string& layer_id) const;
  void validate(const AttachmentPoint& point) const;

  bool frozen() const { return frozen_; }
  void freeze();

  const std::vector<TensorT>& layer_params(std::size_t i) const {
    return params_.at(i);
  }
  std::vector<NamedParam<T>> parameters();
  std::size_t parameter_count() const;

  Var<T> forward(Tape<T>& tape, Var<T> x, const Hook& hook = {}) const;
  // Runs layers [begin, end) on `h`, the output of layer begin-1.
  Var<T> forward_range(Tape<T>& tape, Var<T> h, std::size_t begin,
                       std::size_t end, const Hook& hook = {}) const;
  TensorT forward(const TensorT& x) const;

  template <typename U>
  BaseNetwork<U> cast() const {
    BaseNetwork<U> out(layers_, input_shape_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      for (std::size_t k = 0; k < params_[i].size(); ++k)
        out.params_[i][k] = params_[i][k].template cast<U>();
    if (frozen_) out.freeze();
    return out;
  }

 private:
  template <typename U>
  friend class BaseNetwork;
  template <typename U>
  friend BaseNetwork<U> build_base_network(std::vector<LayerSpec>, Shape,
                                           std::uint64_t);
  friend BaseNetwork<float> network_from_payload(std::vector<LayerSpec>, Shape,
                                                 const std::vector<float>&);

  Var<T> apply_layer(Tape<T>& tape, std::size_t i, Var<T> h) const;

  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  std::vector<Shape> shapes_;  // output shape of each layer
  std::vector<std::vector<TensorT>> params_;
  bool frozen_ = false;
};

extern template class BaseNetwork<float>;
extern template class BaseNetwork<double>;

// Rebuilds a frozen network from a flat parameter payload in layer order.
BaseNetwork<float> network_from_payload(std::vector<LayerSpec> spec,
                                        Shape input_shape,
                                        const std::vector<float>& payload);
std::vector<float> network_payload(const BaseNetwork<float>& net);

template <typename T>
struct ForwardResult {
  BasicTensor<T> output;
  std::map<std::string, BasicTensor<T>> captured;
};

// Plain forward pass that also records the pre-activation value z at each
// capture point. Capturing never changes the output.
template <typename T>
ForwardResult<T> forward_base(const BaseNetwork<T>& net,
                              const BasicTensor<T>& x,
                              const std::vector<AttachmentPoint>& capture);

// Classifier: conv(x2) + pool + dense(x3). Layer ids conv1, conv2, fc1..fc3.
std::vector<LayerSpec> toy_cls_layers(const Shape& input_shape,
                                      std::size_t outputs);
// Segmenter: conv(x3) + transposed conv(x2), ids conv1..conv3,
// deconv1..deconv2. Output is [classes, H, W] logits.
std::vector<LayerSpec> toy_fcn_layers(const Shape& input_shape,
                                      std::size_t classes);
std::vector<LayerSpec> architecture_layers(const std::string& name,
                                           const Shape& input_shape,
                                           std::size_t outputs);

}  // namespace plugnet
