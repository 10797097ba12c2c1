#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "plugnet/tensor.hpp"

namespace plugnet {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward visits
/// them in reverse exactly once.
///
/// Leaves created with leaf() or watch() reference caller-owned tensors, which
/// must outlive the tape. A node carries a gradient only if one of its inputs
/// does, so frozen parameters never get a gradient buffer.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owned value that never receives a gradient.
  Var<T> constant(TensorT value);
  // References `t`; tracks a tape-local gradient iff t.requires_grad().
  Var<T> leaf(const TensorT& t);
  // Like leaf(), but backward() also accumulates into t's grad slot.
  Var<T> watch(TensorT& t);
  // Appends an op result. `backward` may be empty for non-differentiable ops.
  Var<T> record(TensorT value, std::vector<std::size_t> inputs,
                BackwardFn backward);

  const TensorT& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() w.r.t. node `v`; empty if none.
  std::span<const T> grad(Var<T> v) const;
  // Zero-initialized on first access. Only valid for requires_grad nodes.
  std::span<T> grad_buffer(std::size_t id);

  void backward(Var<T> loss);
  // Adds the gradient of every leaf referencing `t` into `out`.
  void accumulate_grad(const TensorT& t, std::span<T> out) const;

  void note_layer(const std::string& layer_id) { ++layer_calls_[layer_id]; }
  std::size_t layer_calls(const std::string& layer_id) const;

 private:
  struct Node {
    TensorT owned;
    const TensorT* ref = nullptr;
    TensorT* sink = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> layer_calls_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Runs tape.backward(loss); gradients of watch()ed tensors land in their
// grad slots.
template <typename T>
void backward(Var<T> loss, Tape<T>& tape) {
  tape.backward(loss);
}

enum class Activation { kIdentity, kRelu, kSigmoid, kSoftmaxLastDim };
enum class LossKind { kCrossEntropy, kBinaryCrossEntropy };

std::string to_string(Activation kind);
Activation parse_activation(const std::string& name);
std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct ConvParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
// Rank-2 transpose.
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// y = W x + b for x [in], W [out, in], b [out].
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, ConvParams p);
template <typename T>
Var<T> conv2d_transposed(Var<T> input, Var<T> kernel, ConvParams p);
// x [C,H,W] + b[c] broadcast over each channel.
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> bias);
template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window, std::size_t stride);
template <typename T> Var<T> activation(Var<T> x, Activation kind);

/// Loss restricted to positions where mask == 1.
///
/// binary_cross_entropy averages over unmasked entries. cross_entropy treats
/// the last axis as classes: each row's softmax is renormalized over its
/// unmasked classes and rows are averaged (rows with no unmasked class are
/// skipped).
template <typename T>
Var<T> masked_loss(Var<T> logits, const BasicTensor<T>& target,
                   const BasicTensor<T>& mask, LossKind kind);

// Output spatial size of a convolution; throws if the kernel does not fit.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, ConvParams p);
// Output spatial size of a transposed convolution; throws if <= 0.
std::size_t conv_transposed_out_size(std::size_t in, std::size_t kernel,
                                     ConvParams p);

}  // namespace plugnet
