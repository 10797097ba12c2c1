#include "plugnet/plugin.hpp"

#include <cmath>
#include <map>

#include "plugnet/init.hpp"
#include "plugnet/rng.hpp"

namespace plugnet {

std::string to_string(FusionOp op) {
  switch (op) {
    case FusionOp::kAdditive: return "additive";
    case FusionOp::kAffine: return "affine";
    case FusionOp::kMultiplicative: return "multiplicative";
    case FusionOp::kResidual: return "residual";
  }
  return "?";
}

FusionOp parse_fusion_op(const std::string& name) {
  if (name == "additive") return FusionOp::kAdditive;
  if (name == "affine") return FusionOp::kAffine;
  if (name == "multiplicative") return FusionOp::kMultiplicative;
  if (name == "residual") return FusionOp::kResidual;
  throw ConfigError("unknown fusion operator '" + name + "'");
}

std::size_t required_output_dim(const AttachmentPoint& point, FusionOp op) {
  return point.width * (op == FusionOp::kAffine ? 2 : 1);
}

namespace {

// z viewed as [channels, plane]; plane == 1 for linear sites.
template <typename T>
void check_fusion_width(std::size_t channels, std::size_t r_len, FusionOp op,
                        const char* site) {
  const std::size_t expected = channels * (op == FusionOp::kAffine ? 2 : 1);
  if (r_len != expected) {
    throw Error(std::string(site) + " " + to_string(op) +
                " fusion expects r of width " + std::to_string(expected) +
                ", got " + std::to_string(r_len));
  }
}

template <typename T>
std::vector<T> fuse_values(std::span<const T> z, std::span<const T> r,
                           std::size_t channels, std::size_t plane,
                           FusionOp op) {
  std::vector<T> out(z.size());
  for (std::size_t c = 0; c < channels; ++c) {
    const T* zc = z.data() + c * plane;
    T* oc = out.data() + c * plane;
    switch (op) {
      case FusionOp::kAdditive: {
        const T rc = r[c];
        for (std::size_t q = 0; q < plane; ++q) oc[q] = zc[q] + rc;
        break;
      }
      case FusionOp::kAffine: {
        const T ra = r[c], rb = r[channels + c];
        for (std::size_t q = 0; q < plane; ++q) oc[q] = ra * zc[q] + rb;
        break;
      }
      case FusionOp::kMultiplicative: {
        const T rc = r[c];
        for (std::size_t q = 0; q < plane; ++q) oc[q] = zc[q] * rc;
        break;
      }
      case FusionOp::kResidual: {
        const T rc = r[c];
        for (std::size_t q = 0; q < plane; ++q) oc[q] = zc[q] + zc[q] * rc;
        break;
      }
    }
  }
  return out;
}

template <typename T>
Var<T> fuse_impl(Var<T> z, Var<T> r, FusionOp op, std::size_t channels,
                 std::size_t plane) {
  if (z.tape == nullptr || z.tape != r.tape) {
    throw Error("fusion operands recorded on different tapes");
  }
  const auto& zv = z.value();
  const auto& rv = r.value();
  std::vector<T> out = fuse_values<T>(zv.values(), rv.values(), channels,
                                      plane, op);
  const std::size_t iz = z.id, ir = r.id;
  return z.tape->record(
      BasicTensor<T>(zv.shape(), std::move(out)), {iz, ir},
      [=](Tape<T>& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& Z = t.value(iz);
        const auto& R = t.value(ir);
        auto gz = t.grad_buffer(iz);
        auto gr = t.grad_buffer(ir);
        for (std::size_t c = 0; c < channels; ++c) {
          const T* gc = g.data() + c * plane;
          const T* zc = Z.data() + c * plane;
          T* gzc = gz.empty() ? nullptr : gz.data() + c * plane;
          // dz~/dz per element, and sum over the plane of g * dz~/dr_c
          T dz_scale = T(1);
          switch (op) {
            case FusionOp::kAdditive: dz_scale = T(1); break;
            case FusionOp::kAffine: dz_scale = R[c]; break;
            case FusionOp::kMultiplicative: dz_scale = R[c]; break;
            case FusionOp::kResidual: dz_scale = T(1) + R[c]; break;
          }
          if (gzc)
            for (std::size_t q = 0; q < plane; ++q) gzc[q] += gc[q] * dz_scale;
          if (gr.empty()) continue;
          T gsum = 0, gzsum = 0;
          for (std::size_t q = 0; q < plane; ++q) {
            gsum += gc[q];
            gzsum += gc[q] * zc[q];
          }
          switch (op) {
            case FusionOp::kAdditive: gr[c] += gsum; break;
            case FusionOp::kAffine:
              gr[c] += gzsum;
              gr[channels + c] += gsum;
              break;
            case FusionOp::kMultiplicative:
            case FusionOp::kResidual: gr[c] += gzsum; break;
          }
        }
      });
}

}  // namespace

template <typename T>
Var<T> fuse_linear(Var<T> z, Var<T> r, FusionOp op) {
  const auto& zv = z.value();
  if (zv.rank() != 1) {
    throw Error("linear fusion expects z of rank 1, got " +
                shape_str(zv.shape()));
  }
  check_fusion_width<T>(zv.size(), r.value().size(), op, "linear");
  return fuse_impl(z, r, op, zv.size(), 1);
}

template <typename T>
Var<T> fuse_conv(Var<T> z, Var<T> r, FusionOp op) {
  const auto& zv = z.value();
  if (zv.rank() != 3) {
    throw Error("conv fusion expects z of shape [c,h,w], got " +
                shape_str(zv.shape()));
  }
  check_fusion_width<T>(zv.dim(0), r.value().size(), op, "conv");
  return fuse_impl(z, r, op, zv.dim(0), zv.dim(1) * zv.dim(2));
}

template <typename T>
Var<T> fuse(Var<T> z, Var<T> r, FusionOp op, Site site) {
  return site == Site::kLinearPreactivation ? fuse_linear(z, r, op)
                                            : fuse_conv(z, r, op);
}

template <typename T>
BasicTensor<T> fuse_linear(const BasicTensor<T>& z, const BasicTensor<T>& r,
                           FusionOp op) {
  Tape<T> tape;
  return fuse_linear(tape.constant(z), tape.constant(r), op).value();
}

template <typename T>
BasicTensor<T> fuse_conv(const BasicTensor<T>& z, const BasicTensor<T>& r,
                         FusionOp op) {
  Tape<T> tape;
  return fuse_conv(tape.constant(z), tape.constant(r), op).value();
}

// ---------------------------------------------------------------------------
// PluginNetwork
// ---------------------------------------------------------------------------

template <typename T>
PluginNetwork<T>::PluginNetwork(std::size_t pe_dim,
                                std::vector<std::size_t> hidden_sizes,
                                AttachmentPoint attachment, FusionOp op,
                                std::uint64_t seed)
    : input_dim_(pe_dim),
      output_dim_(required_output_dim(attachment, op)),
      hidden_(std::move(hidden_sizes)),
      attachment_(std::move(attachment)),
      op_(op) {
  if (input_dim_ == 0) throw Error("plugin partial-evidence dim must be >= 1");
  if (attachment_.width == 0) throw Error("attachment width must be >= 1");
  for (std::size_t h : hidden_) {
    if (h == 0) throw Error("plugin hidden layer sizes must be >= 1");
  }
  Rng rng(derive_seed(seed, "plugin-init"));
  std::size_t fan_in = input_dim_;
  std::vector<std::size_t> widths = hidden_;
  widths.push_back(output_dim_);
  for (std::size_t fan_out : widths) {
    BasicTensor<T> w = xavier_init(fan_out, fan_in, rng).template cast<T>();
    w.set_requires_grad(true);
    weights_.push_back(std::move(w));
    biases_.push_back(BasicTensor<T>::zeros({fan_out}, true));
    fan_in = fan_out;
  }
}

template <typename T>
std::vector<NamedParam<T>> PluginNetwork<T>::parameters(
    const std::string& prefix) {
  std::vector<NamedParam<T>> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back({prefix + ".fc" + std::to_string(i + 1) + ".weight",
                   &weights_[i]});
    out.push_back({prefix + ".fc" + std::to_string(i + 1) + ".bias",
                   &biases_[i]});
  }
  return out;
}

template <typename T>
std::size_t PluginNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i)
    n += weights_[i].size() + biases_[i].size();
  return n;
}

template <typename T>
std::vector<T> PluginNetwork<T>::flat_parameters() const {
  std::vector<T> out;
  out.reserve(parameter_count());
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.insert(out.end(), weights_[i].values().begin(),
               weights_[i].values().end());
    out.insert(out.end(), biases_[i].values().begin(),
               biases_[i].values().end());
  }
  return out;
}

template <typename T>
void PluginNetwork<T>::assign_parameters(std::span<const T> flat) {
  if (flat.size() != parameter_count()) {
    throw Error("payload length mismatch: expected " +
                std::to_string(parameter_count()) + " values, got " +
                std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    for (TensorT* t : {&weights_[i], &biases_[i]}) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                  t->size(), t->values().begin());
      offset += t->size();
    }
  }
}

template <typename T>
Var<T> PluginNetwork<T>::forward(Tape<T>& tape, Var<T> pe) const {
  const auto& v = pe.value();
  if (v.rank() != 1 || v.size() != input_dim_) {
    throw Error("partial evidence has shape " + shape_str(v.shape()) +
                ", plugin expects [" + std::to_string(input_dim_) + "]");
  }
  for (T value : v.values()) {
    if (!std::isfinite(static_cast<double>(value))) {
      throw Error("partial evidence contains a non-finite value");
    }
  }
  Var<T> h = pe;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = linear(h, tape.leaf(weights_[i]), tape.leaf(biases_[i]));
    if (i + 1 < weights_.size()) h = activation(h, Activation::kRelu);
  }
  return h;
}

template <typename T>
BasicTensor<T> PluginNetwork<T>::forward(const TensorT& pe) const {
  Tape<T> tape;
  return forward(tape, tape.constant(pe)).value();
}

template class PluginNetwork<float>;
template class PluginNetwork<double>;

// ---------------------------------------------------------------------------
// JointModel
// ---------------------------------------------------------------------------

template <typename T>
JointModel<T>::JointModel(std::shared_ptr<const BaseNetwork<T>> base,
                          std::vector<PluginNetwork<T>> plugins)
    : base_(std::move(base)), plugins_(std::move(plugins)) {
  if (!base_) throw Error("joint model needs a base network");
  if (!base_->frozen()) throw Error("base must be frozen");
  std::map<std::size_t, std::size_t> used;
  for (std::size_t k = 0; k < plugins_.size(); ++k) {
    const auto& p = plugins_[k];
    base_->validate(p.attachment());
    if (p.output_dim() != required_output_dim(p.attachment(), p.op())) {
      throw Error("plugin output dim does not match its attachment");
    }
    if (p.input_dim() != plugins_.front().input_dim()) {
      throw Error("plugins disagree on the partial-evidence dimension");
    }
    const std::size_t layer = base_->layer_index(p.attachment().layer_id);
    if (!used.emplace(layer, k).second) {
      throw Error("more than one plugin attached to '" +
                  p.attachment().layer_id + "'");
    }
    layer_of_plugin_.push_back(layer);
  }
}

template <typename T>
std::size_t JointModel<T>::pe_dim() const {
  return plugins_.empty() ? 0 : plugins_.front().input_dim();
}

template <typename T>
std::vector<NamedParam<T>> JointModel<T>::parameters() {
  std::vector<NamedParam<T>> out;
  for (std::size_t k = 0; k < plugins_.size(); ++k) {
    auto p = plugins_[k].parameters("plugin" + std::to_string(k));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
Var<T> JointModel<T>::forward(Tape<T>& tape, Var<T> x, Var<T> pe) const {
  if (plugins_.empty()) return base_->forward(tape, x);
  auto hook = [&](std::size_t layer, Var<T> z) {
    for (std::size_t k = 0; k < plugins_.size(); ++k) {
      if (layer_of_plugin_[k] != layer) continue;
      const auto& p = plugins_[k];
      return fuse(z, p.forward(tape, pe), p.op(), p.attachment().site);
    }
    return z;
  };
  return base_->forward(tape, x, hook);
}

template <typename T>
BasicTensor<T> JointModel<T>::forward(const TensorT& x,
                                      const TensorT& pe) const {
  Tape<T> tape;
  return forward(tape, tape.constant(x), tape.constant(pe)).value();
}

template class JointModel<float>;
template class JointModel<double>;

#define PLUGNET_INSTANTIATE_FUSION(T)                                         \
  template Var<T> fuse_linear(Var<T>, Var<T>, FusionOp);                      \
  template Var<T> fuse_conv(Var<T>, Var<T>, FusionOp);                        \
  template Var<T> fuse(Var<T>, Var<T>, FusionOp, Site);                       \
  template BasicTensor<T> fuse_linear(const BasicTensor<T>&,                  \
                                      const BasicTensor<T>&, FusionOp);       \
  template BasicTensor<T> fuse_conv(const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&, FusionOp);

PLUGNET_INSTANTIATE_FUSION(float)
PLUGNET_INSTANTIATE_FUSION(double)

#undef PLUGNET_INSTANTIATE_FUSION

}  // namespace plugnet
