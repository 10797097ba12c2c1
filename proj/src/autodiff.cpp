#include "plugnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace plugnet {

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(TensorT value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(const TensorT& t) {
  Node node;
  node.ref = &t;
  node.requires_grad = t.requires_grad();
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::watch(TensorT& t) {
  Node node;
  node.ref = &t;
  node.sink = &t;
  node.requires_grad = t.requires_grad();
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(TensorT value, std::vector<std::size_t> inputs,
                       BackwardFn backward) {
  const std::size_t self = nodes_.size();
  bool rg = false;
  for (std::size_t in : inputs) {
    if (in >= self) throw Error("tape input recorded after its consumer");
    rg = rg || nodes_[in].requires_grad;
  }
  Node node;
  node.owned = std::move(value);
  node.requires_grad = rg && static_cast<bool>(backward);
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, self};
}

template <typename T>
const BasicTensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.ref ? *n.ref : n.owned;
}

template <typename T>
std::span<const T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad;
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate_grad(const TensorT& t, std::span<T> out) const {
  if (out.size() != t.size()) throw Error("gradient buffer has the wrong size");
  for (const Node& n : nodes_) {
    if (n.ref != &t || n.grad.empty()) continue;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += n.grad[k];
  }
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw Error("loss was recorded on another tape");
  const TensorT& lv = value(loss.id);
  if (lv.size() != 1) {
    throw Error("backward requires a scalar loss, got shape " +
                shape_str(lv.shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.sink) {
      std::span<T> g = n.sink->mutable_grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
}

template <typename T>
std::size_t Tape<T>::layer_calls(const std::string& layer_id) const {
  auto it = layer_calls_.find(layer_id);
  return it == layer_calls_.end() ? 0 : it->second;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftmaxLastDim: return "softmax_lastdim";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "softmax_lastdim") return Activation::kSoftmaxLastDim;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(LossKind kind) {
  return kind == LossKind::kCrossEntropy ? "cross_entropy"
                                         : "binary_cross_entropy";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "cross_entropy") return LossKind::kCrossEntropy;
  if (name == "binary_cross_entropy") return LossKind::kBinaryCrossEntropy;
  throw ConfigError("unknown loss kind '" + name + "'");
}

std::size_t conv_out_size(std::size_t in, std::size_t kernel, ConvParams p) {
  if (p.stride == 0) throw Error("convolution stride must be >= 1");
  if (kernel == 0 || kernel > in + 2 * p.padding) {
    throw Error("kernel " + std::to_string(kernel) +
                " larger than padded input " +
                std::to_string(in + 2 * p.padding));
  }
  return (in + 2 * p.padding - kernel) / p.stride + 1;
}

std::size_t conv_transposed_out_size(std::size_t in, std::size_t kernel,
                                     ConvParams p) {
  if (p.stride == 0) throw Error("convolution stride must be >= 1");
  const long long out = static_cast<long long>(in - 1) *
                            static_cast<long long>(p.stride) -
                        2 * static_cast<long long>(p.padding) +
                        static_cast<long long>(kernel);
  if (out <= 0) {
    throw Error("transposed convolution output dimension " +
                std::to_string(out) + " <= 0");
  }
  return static_cast<std::size_t>(out);
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw Error("operands recorded on different tapes");
  }
  return *a.tape;
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                " vs " + shape_str(b.shape()));
  }
}

// Range of output positions o with 0 <= o*stride + offset < limit.
struct Range {
  std::size_t lo, hi;
};

Range valid_range(std::size_t n_out, std::size_t stride, long long offset,
                  std::size_t limit) {
  long long lo = 0;
  if (offset < 0) lo = (-offset + static_cast<long long>(stride) - 1) /
                       static_cast<long long>(stride);
  long long hi_excl = 0;
  const long long room = static_cast<long long>(limit) - offset;
  if (room > 0) {
    hi_excl = (room - 1) / static_cast<long long>(stride) + 1;
  }
  hi_excl = std::min<long long>(hi_excl, static_cast<long long>(n_out));
  if (hi_excl < lo) hi_excl = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi_excl)};
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av, bv, "add");
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      BasicTensor<T>(av.shape(), std::move(out)), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        for (std::size_t in : {ia, ib}) {
          auto gi = t.grad_buffer(in);
          for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += g[k];
        }
      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av, bv, "mul");
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      BasicTensor<T>(av.shape(), std::move(out)), {ia, ib},
      [ia, ib](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& x = t.value(ia);
        const auto& y = t.value(ib);
        auto ga = t.grad_buffer(ia);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[k] * y[k];
        auto gb = t.grad_buffer(ib);
        for (std::size_t k = 0; k < gb.size(); ++k) gb[k] += g[k] * x[k];
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T s = 0;
  for (T v : av.values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(BasicTensor<T>::scalar(s), {ia},
                        [ia](Tape<T>& t, std::size_t self) {
                          const T g = t.grad_buffer(self)[0];
                          for (T& v : t.grad_buffer(ia)) v += g;
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  out.set_requires_grad(false);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia},
                        [ia](Tape<T>& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          auto gi = t.grad_buffer(ia);
                          for (std::size_t k = 0; k < gi.size(); ++k)
                            gi[k] += g[k];
                        });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() != 2) {
    throw Error("transpose expects rank 2, got " + shape_str(av.shape()));
  }
  const std::size_t m = av.dim(0), n = av.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id;
  return a.tape->record(BasicTensor<T>({n, m}, std::move(out)), {ia},
                        [ia, m, n](Tape<T>& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          auto gi = t.grad_buffer(ia);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              gi[i * n + j] += g[j * m + i];
                        });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw Error("matmul: dimension mismatch " + shape_str(av.shape()) +
                " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      BasicTensor<T>({m, n}, std::move(out)), {ia, ib},
      [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& A = t.value(ia);
        const auto& B = t.value(ib);
        auto ga = t.grad_buffer(ia);
        if (!ga.empty()) {
          // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s = 0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
              ga[i * k + p] += s;
            }
        }
        auto gb = t.grad_buffer(ib);
        if (!gb.empty()) {
          // dB = A^T * dC
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = A[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  Tape<T>& tape = same_tape(x, weight);
  same_tape(x, bias);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  if (wv.rank() != 2 || xv.rank() != 1 || wv.dim(1) != xv.dim(0) ||
      bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
    throw Error("linear: dimension mismatch W" + shape_str(wv.shape()) +
                " x" + shape_str(xv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t out_dim = wv.dim(0), in_dim = wv.dim(1);
  std::vector<T> out(out_dim);
  for (std::size_t o = 0; o < out_dim; ++o) {
    T s = bv[o];
    const T* row = wv.data() + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) s += row[i] * xv[i];
    out[o] = s;
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return tape.record(
      BasicTensor<T>({out_dim}, std::move(out)), {ix, iw, ib},
      [ix, iw, ib, out_dim, in_dim](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& X = t.value(ix);
        const auto& W = t.value(iw);
        auto gx = t.grad_buffer(ix);
        if (!gx.empty()) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const T go = g[o];
            const T* row = W.data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) gx[i] += row[i] * go;
          }
        }
        auto gw = t.grad_buffer(iw);
        if (!gw.empty()) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const T go = g[o];
            T* row = gw.data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) row[i] += go * X[i];
          }
        }
        auto gb = t.grad_buffer(ib);
        for (std::size_t o = 0; o < gb.size(); ++o) gb[o] += g[o];
      });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, ConvParams p) {
  Tape<T>& tape = same_tape(input, kernel);
  same_tape(input, bias);
  const auto& xv = input.value();
  const auto& kv = kernel.value();
  const auto& bv = bias.value();
  if (xv.rank() != 3 || kv.rank() != 4 || kv.dim(1) != xv.dim(0) ||
      bv.rank() != 1 || bv.dim(0) != kv.dim(0)) {
    throw Error("conv2d: incompatible shapes input" + shape_str(xv.shape()) +
                " kernel" + shape_str(kv.shape()) + " bias" +
                shape_str(bv.shape()));
  }
  const std::size_t ci_n = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const std::size_t co_n = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  const std::size_t ho = conv_out_size(h, kh, p);
  const std::size_t wo = conv_out_size(w, kw, p);
  const std::size_t s = p.stride;
  const long long pad = static_cast<long long>(p.padding);

  std::vector<T> out(co_n * ho * wo);
  for (std::size_t co = 0; co < co_n; ++co) {
    T* oplane = out.data() + co * ho * wo;
    std::fill(oplane, oplane + ho * wo, bv[co]);
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const T* iplane = xv.data() + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const Range ry = valid_range(ho, s, static_cast<long long>(ky) - pad, h);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const Range rx = valid_range(wo, s, static_cast<long long>(kx) - pad, w);
          const T wk = kv[((co * ci_n + ci) * kh + ky) * kw + kx];
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const T* irow = iplane + (oy * s + ky - p.padding) * w;
            T* orow = oplane + oy * wo;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
              orow[ox] += wk * irow[ox * s + kx - p.padding];
          }
        }
      }
    }
  }

  const std::size_t ix = input.id, ik = kernel.id, ib = bias.id;
  return tape.record(
      BasicTensor<T>({co_n, ho, wo}, std::move(out)), {ix, ik, ib},
      [=](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& X = t.value(ix);
        const auto& K = t.value(ik);
        auto gx = t.grad_buffer(ix);
        auto gk = t.grad_buffer(ik);
        auto gb = t.grad_buffer(ib);
        for (std::size_t co = 0; co < co_n; ++co) {
          const T* gplane = g.data() + co * ho * wo;
          if (!gb.empty()) {
            T acc = 0;
            for (std::size_t q = 0; q < ho * wo; ++q) acc += gplane[q];
            gb[co] += acc;
          }
          if (gx.empty() && gk.empty()) continue;
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T* iplane = X.data() + ci * h * w;
            T* giplane = gx.empty() ? nullptr : gx.data() + ci * h * w;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const Range ry = valid_range(ho, s, static_cast<long long>(ky) - pad, h);
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const Range rx = valid_range(wo, s, static_cast<long long>(kx) - pad, w);
                const std::size_t kidx = ((co * ci_n + ci) * kh + ky) * kw + kx;
                const T wk = K[kidx];
                T dk = 0;
                for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                  const std::size_t iy = oy * s + ky - p.padding;
                  const T* grow = gplane + oy * wo;
                  const T* irow = iplane + iy * w;
                  if (giplane) {
                    T* girow = giplane + iy * w;
                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                      girow[ox * s + kx - p.padding] += wk * grow[ox];
                  }
                  if (!gk.empty())
                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                      dk += grow[ox] * irow[ox * s + kx - p.padding];
                }
                if (!gk.empty()) gk[kidx] += dk;
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> conv2d_transposed(Var<T> input, Var<T> kernel, ConvParams p) {
  Tape<T>& tape = same_tape(input, kernel);
  const auto& xv = input.value();
  const auto& kv = kernel.value();
  if (xv.rank() != 3 || kv.rank() != 4 || kv.dim(0) != xv.dim(0)) {
    throw Error("conv2d_transposed: incompatible shapes input" +
                shape_str(xv.shape()) + " kernel" + shape_str(kv.shape()));
  }
  const std::size_t ci_n = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const std::size_t co_n = kv.dim(1), kh = kv.dim(2), kw = kv.dim(3);
  const std::size_t ho = conv_transposed_out_size(h, kh, p);
  const std::size_t wo = conv_transposed_out_size(w, kw, p);
  const std::size_t s = p.stride;
  const long long pad = static_cast<long long>(p.padding);

  // Output position o = i*s + k - pad; iterate over input positions i whose
  // target lands inside the output.
  auto in_range = [&](std::size_t n_in, std::size_t k, std::size_t n_out) {
    return valid_range(n_in, s, static_cast<long long>(k) - pad, n_out);
  };

  std::vector<T> out(co_n * ho * wo, T(0));
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    const T* iplane = xv.data() + ci * h * w;
    for (std::size_t co = 0; co < co_n; ++co) {
      T* oplane = out.data() + co * ho * wo;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const Range ry = in_range(h, ky, ho);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const Range rx = in_range(w, kx, wo);
          const T wk = kv[((ci * co_n + co) * kh + ky) * kw + kx];
          for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
            const T* irow = iplane + iy * w;
            T* orow = oplane + (iy * s + ky - p.padding) * wo;
            for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
              orow[ix * s + kx - p.padding] += wk * irow[ix];
          }
        }
      }
    }
  }

  const std::size_t ix_id = input.id, ik = kernel.id;
  return tape.record(
      BasicTensor<T>({co_n, ho, wo}, std::move(out)), {ix_id, ik},
      [=](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& X = t.value(ix_id);
        const auto& K = t.value(ik);
        auto gx = t.grad_buffer(ix_id);
        auto gk = t.grad_buffer(ik);
        if (gx.empty() && gk.empty()) return;
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
          const T* iplane = X.data() + ci * h * w;
          T* giplane = gx.empty() ? nullptr : gx.data() + ci * h * w;
          for (std::size_t co = 0; co < co_n; ++co) {
            const T* gplane = g.data() + co * ho * wo;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const Range ry = valid_range(h, s, static_cast<long long>(ky) - pad, ho);
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const Range rx = valid_range(w, s, static_cast<long long>(kx) - pad, wo);
                const std::size_t kidx = ((ci * co_n + co) * kh + ky) * kw + kx;
                const T wk = K[kidx];
                T dk = 0;
                for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
                  const T* grow = gplane + (iy * s + ky - p.padding) * wo;
                  const T* irow = iplane + iy * w;
                  if (giplane) {
                    T* girow = giplane + iy * w;
                    for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
                      girow[ix] += wk * grow[ix * s + kx - p.padding];
                  }
                  if (!gk.empty())
                    for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
                      dk += irow[ix] * grow[ix * s + kx - p.padding];
                }
                if (!gk.empty()) gk[kidx] += dk;
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  Tape<T>& tape = same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw Error("add_channel_bias: incompatible shapes " +
                shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t c_n = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  std::vector<T> out(xv.values().begin(), xv.values().end());
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t q = 0; q < plane; ++q) out[c * plane + q] += bv[c];
  const std::size_t ix = x.id, ib = bias.id;
  return tape.record(BasicTensor<T>(xv.shape(), std::move(out)), {ix, ib},
                     [ix, ib, c_n, plane](Tape<T>& t, std::size_t self) {
                       auto g = t.grad_buffer(self);
                       auto gx = t.grad_buffer(ix);
                       for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g[k];
                       auto gb = t.grad_buffer(ib);
                       if (gb.empty()) return;
                       for (std::size_t c = 0; c < c_n; ++c) {
                         T acc = 0;
                         for (std::size_t q = 0; q < plane; ++q)
                           acc += g[c * plane + q];
                         gb[c] += acc;
                       }
                     });
}

template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window, std::size_t stride) {
  const auto& xv = input.value();
  if (xv.rank() != 3) {
    throw Error("maxpool2d expects [C,H,W], got " + shape_str(xv.shape()));
  }
  const std::size_t c_n = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const ConvParams p{stride, 0};
  const std::size_t ho = conv_out_size(h, window, p);
  const std::size_t wo = conv_out_size(w, window, p);
  std::vector<T> out(c_n * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = c * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx =
                c * h * w + (oy * stride + dy) * w + ox * stride + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (c * ho + oy) * wo + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  const std::size_t ix = input.id;
  return input.tape->record(
      BasicTensor<T>({c_n, ho, wo}, std::move(out)), {ix},
      [ix, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        auto gx = t.grad_buffer(ix);
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
      });
}

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
  const auto& xv = x.value();
  const std::size_t n = xv.size();
  const std::size_t ix = x.id;
  std::vector<T> out(n);
  switch (kind) {
    case Activation::kIdentity:
      return reshape(x, xv.shape());
    case Activation::kRelu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
      return x.tape->record(
          BasicTensor<T>(xv.shape(), std::move(out)), {ix},
          [ix](Tape<T>& t, std::size_t self) {
            auto g = t.grad_buffer(self);
            const auto& X = t.value(ix);
            auto gx = t.grad_buffer(ix);
            for (std::size_t k = 0; k < gx.size(); ++k)
              if (X[k] > T(0)) gx[k] += g[k];
          });
    }
    case Activation::kSigmoid: {
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(xv[i]);
      return x.tape->record(
          BasicTensor<T>(xv.shape(), std::move(out)), {ix},
          [ix](Tape<T>& t, std::size_t self) {
            auto g = t.grad_buffer(self);
            const auto& Y = t.value(self);
            auto gx = t.grad_buffer(ix);
            for (std::size_t k = 0; k < gx.size(); ++k)
              gx[k] += g[k] * Y[k] * (T(1) - Y[k]);
          });
    }
    case Activation::kSoftmaxLastDim: {
      const std::size_t last = xv.shape().back();
      const std::size_t rows = n / last;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * last;
        T* o = out.data() + r * last;
        const T m = *std::max_element(in, in + last);
        T z = 0;
        for (std::size_t j = 0; j < last; ++j) z += (o[j] = std::exp(in[j] - m));
        for (std::size_t j = 0; j < last; ++j) o[j] /= z;
      }
      return x.tape->record(
          BasicTensor<T>(xv.shape(), std::move(out)), {ix},
          [ix, rows, last](Tape<T>& t, std::size_t self) {
            auto g = t.grad_buffer(self);
            const auto& Y = t.value(self);
            auto gx = t.grad_buffer(ix);
            for (std::size_t r = 0; r < rows; ++r) {
              T dot = 0;
              for (std::size_t j = 0; j < last; ++j)
                dot += g[r * last + j] * Y[r * last + j];
              for (std::size_t j = 0; j < last; ++j)
                gx[r * last + j] += Y[r * last + j] * (g[r * last + j] - dot);
            }
          });
    }
  }
  throw Error("unknown activation kind");
}

template <typename T>
Var<T> masked_loss(Var<T> logits, const BasicTensor<T>& target,
                   const BasicTensor<T>& mask, LossKind kind) {
  const auto& z = logits.value();
  require_same_shape(z, target, "masked_loss target");
  require_same_shape(z, mask, "masked_loss mask");
  std::size_t support = 0;
  for (T m : mask.values()) {
    if (m != T(0) && m != T(1)) throw Error("mask entries must be 0 or 1");
    if (m == T(1)) ++support;
  }
  if (support == 0) throw Error("empty loss support");

  const std::size_t n = z.size();
  std::vector<T> dlogits(n, T(0));
  double loss = 0;

  if (kind == LossKind::kBinaryCrossEntropy) {
    const double inv = 1.0 / static_cast<double>(support);
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i] == T(0)) continue;
      const double zi = z[i], ti = target[i];
      // softplus(z) - t z, the stable form of the logistic loss
      loss += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - ti * zi;
      dlogits[i] = static_cast<T>((sigmoid_scalar(zi) - ti) * inv);
    }
    loss *= inv;
  } else {
    const std::size_t classes = z.shape().back();
    const std::size_t rows = n / classes;
    std::size_t active_rows = 0;
    std::vector<double> p(classes);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * classes;
      double m = -std::numeric_limits<double>::infinity();
      double tsum = 0;
      bool any = false;
      for (std::size_t j = 0; j < classes; ++j) {
        if (mask[base + j] == T(0)) continue;
        any = true;
        m = std::max(m, static_cast<double>(z[base + j]));
        tsum += target[base + j];
      }
      if (!any) continue;
      if (std::abs(tsum - 1.0) > 1e-6) {
        throw Error("cross_entropy target row " + std::to_string(r) +
                    " is not one-hot over unmasked classes");
      }
      ++active_rows;
      double zsum = 0;
      for (std::size_t j = 0; j < classes; ++j) {
        if (mask[base + j] == T(0)) continue;
        zsum += (p[j] = std::exp(z[base + j] - m));
      }
      const double lse = m + std::log(zsum);
      for (std::size_t j = 0; j < classes; ++j) {
        if (mask[base + j] == T(0)) continue;
        p[j] /= zsum;
        loss += target[base + j] * (lse - z[base + j]);
        dlogits[base + j] = static_cast<T>(p[j] * tsum - target[base + j]);
      }
    }
    const double inv = 1.0 / static_cast<double>(active_rows);
    loss *= inv;
    for (T& d : dlogits) d = static_cast<T>(d * inv);
  }

  const std::size_t iz = logits.id;
  return logits.tape->record(
      BasicTensor<T>::scalar(static_cast<T>(loss)), {iz},
      [iz, dlogits = std::move(dlogits)](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        auto gz = t.grad_buffer(iz);
        for (std::size_t k = 0; k < gz.size(); ++k) gz[k] += g * dlogits[k];
      });
}

#define PLUGNET_INSTANTIATE_OPS(T)                                           \
  template Var<T> add(Var<T>, Var<T>);                                       \
  template Var<T> mul(Var<T>, Var<T>);                                       \
  template Var<T> sum(Var<T>);                                               \
  template Var<T> reshape(Var<T>, Shape);                                    \
  template Var<T> transpose(Var<T>);                                         \
  template Var<T> matmul(Var<T>, Var<T>);                                    \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                            \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, ConvParams);                \
  template Var<T> conv2d_transposed(Var<T>, Var<T>, ConvParams);            \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                          \
  template Var<T> maxpool2d(Var<T>, std::size_t, std::size_t);               \
  template Var<T> activation(Var<T>, Activation);                            \
  template Var<T> masked_loss(Var<T>, const BasicTensor<T>&,                 \
                              const BasicTensor<T>&, LossKind);

PLUGNET_INSTANTIATE_OPS(float)
PLUGNET_INSTANTIATE_OPS(double)

#undef PLUGNET_INSTANTIATE_OPS

}  // namespace plugnet
