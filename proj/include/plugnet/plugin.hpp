#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "plugnet/autodiff.hpp"
#include "plugnet/layers.hpp"
#include "plugnet/tensor.hpp"

namespace plugnet {

/// How a plugin output r modulates a pre-activation z.
///   additive:       z + r
///   affine:         r_a * z + r_b, with r = r_a || r_b (r has twice the width)
///   multiplicative: z * r
///   residual:       z + z * r
enum class FusionOp { kAdditive, kAffine, kMultiplicative, kResidual };

inline constexpr FusionOp kAllFusionOps[] = {
    FusionOp::kAdditive, FusionOp::kAffine, FusionOp::kMultiplicative,
    FusionOp::kResidual};

std::string to_string(FusionOp op);
FusionOp parse_fusion_op(const std::string& name);

// Width of r a plugin must produce for this point: the layer width n (linear)
// or channel count c (conv), doubled for affine. Never c*h*w.
std::size_t required_output_dim(const AttachmentPoint& point, FusionOp op);

// z [n], r [n] or [2n].
template <typename T>
Var<T> fuse_linear(Var<T> z, Var<T> r, FusionOp op);
// z [c,h,w], r [c] or [2c]; each r_c is broadcast over its channel.
template <typename T>
Var<T> fuse_conv(Var<T> z, Var<T> r, FusionOp op);
template <typename T>
Var<T> fuse(Var<T> z, Var<T> r, FusionOp op, Site site);

// Eager variants for callers without a tape.
template <typename T>
BasicTensor<T> fuse_linear(const BasicTensor<T>& z, const BasicTensor<T>& r,
                           FusionOp op);
template <typename T>
BasicTensor<T> fuse_conv(const BasicTensor<T>& z, const BasicTensor<T>& r,
                         FusionOp op);

/// Fully connected side network r = F_p(pe; w_p). Every hidden layer is
/// followed by ReLU; the output layer is linear.
template <typename T>
class PluginNetwork {
 public:
  using TensorT = BasicTensor<T>;

  // Xavier-initialized weights, zero biases.
  PluginNetwork(std::size_t pe_dim, std::vector<std::size_t> hidden_sizes,
                AttachmentPoint attachment, FusionOp op, std::uint64_t seed);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }
  const std::vector<std::size_t>& hidden_sizes() const { return hidden_; }
  const AttachmentPoint& attachment() const { return attachment_; }
  FusionOp op() const { return op_; }

  // weights[i] is [out, in], biases[i] is [out]; one pair per dense layer.
  std::size_t depth() const { return weights_.size(); }
  const TensorT& weight(std::size_t i) const { return weights_.at(i); }
  const TensorT& bias(std::size_t i) const { return biases_.at(i); }
  std::vector<NamedParam<T>> parameters(const std::string& prefix = "plugin");
  std::size_t parameter_count() const;
  // Flat copy of all parameters in layer order, weights before biases.
  std::vector<T> flat_parameters() const;
  void assign_parameters(std::span<const T> flat);

  Var<T> forward(Tape<T>& tape, Var<T> pe) const;
  TensorT forward(const TensorT& pe) const;

  template <typename U>
  PluginNetwork<U> cast() const {
    PluginNetwork<U> out(input_dim_, hidden_, attachment_, op_, 0);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.weights_[i] = weights_[i].template cast<U>();
      out.biases_[i] = biases_[i].template cast<U>();
    }
    return out;
  }

 private:
  template <typename U>
  friend class PluginNetwork;

  std::size_t input_dim_;
  std::size_t output_dim_;
  std::vector<std::size_t> hidden_;
  AttachmentPoint attachment_;
  FusionOp op_;
  std::vector<TensorT> weights_;
  std::vector<TensorT> biases_;
};

extern template class PluginNetwork<float>;
extern template class PluginNetwork<double>;

template <typename T>
PluginNetwork<T> plugin_new(std::size_t pe_dim,
                            std::vector<std::size_t> hidden_sizes,
                            AttachmentPoint attachment, FusionOp op,
                            std::uint64_t seed) {
  return PluginNetwork<T>(pe_dim, std::move(hidden_sizes),
                          std::move(attachment), op, seed);
}

/// Frozen base network plus plugins: F~(x, pe; w, w_p).
///
/// One forward pass of the base; at each plugin's attachment point the
/// pre-activation z is replaced by z (+) r before the next layer sees it.
template <typename T>
class JointModel {
 public:
  using TensorT = BasicTensor<T>;

  JointModel(std::shared_ptr<const BaseNetwork<T>> base,
             std::vector<PluginNetwork<T>> plugins);

  const BaseNetwork<T>& base() const { return *base_; }
  std::shared_ptr<const BaseNetwork<T>> base_ptr() const { return base_; }
  const std::vector<PluginNetwork<T>>& plugins() const { return plugins_; }
  // 0 when no plugin is attached.
  std::size_t pe_dim() const;

  std::vector<NamedParam<T>> parameters();

  Var<T> forward(Tape<T>& tape, Var<T> x, Var<T> pe) const;
  TensorT forward(const TensorT& x, const TensorT& pe) const;

 private:
  std::shared_ptr<const BaseNetwork<T>> base_;
  std::vector<PluginNetwork<T>> plugins_;
  std::vector<std::size_t> layer_of_plugin_;
};

extern template class JointModel<float>;
extern template class JointModel<double>;

template <typename T>
BasicTensor<T> joint_forward(const JointModel<T>& model,
                             const BasicTensor<T>& x,
                             const BasicTensor<T>& pe) {
  return model.forward(x, pe);
}

}  // namespace plugnet
