#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "plugnet/autodiff.hpp"
#include "plugnet/plugin.hpp"
#include "plugnet/rng.hpp"
#include "plugnet/tensor.hpp"

namespace plugnet::testing {

template <typename T = double>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0,
                             bool requires_grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(scale * rng.normal());
  return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for checks through ReLU kinks.
inline TensorD away_from_zero(Shape shape, Rng& rng, double margin = 0.1,
                              bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = margin + rng.uniform();
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

// Builds a scalar loss from leaves of `inputs` on a fresh tape.
using LossBuilder =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Max relative error between backward() gradients and central differences
// over every entry of every input.
inline double gradient_check(std::vector<TensorD>& inputs, const LossBuilder& f,
                             double h = 1e-3) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    Var<double> loss = f(tape, vars);
    tape.backward(loss);
    for (auto& v : vars) {
      auto g = tape.grad(v);
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(v.value().size(), 0.0);
    }
  }
  auto eval = [&] {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    return f(tape, vars).value().item();
  };
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    auto values = inputs[i].values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + h;
      const double up = eval();
      values[k] = saved - h;
      const double down = eval();
      values[k] = saved;
      worst = std::max(worst, relative_error(analytic[i][k], (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Value of r that leaves z unchanged, entry k of a width-n output.
template <typename T>
T identity_element(FusionOp op, std::size_t k, std::size_t n) {
  switch (op) {
    case FusionOp::kMultiplicative: return T(1);
    case FusionOp::kAffine: return k < n / 2 ? T(1) : T(0);
    default: return T(0);
  }
}

// Zero weights everywhere; the output bias becomes the identity element, so
// the plugin emits it for every partial-evidence vector.
template <typename T>
void make_identity(PluginNetwork<T>& p) {
  std::vector<T> flat(p.parameter_count(), T(0));
  const std::size_t n = p.output_dim();
  for (std::size_t k = 0; k < n; ++k)
    flat[flat.size() - n + k] = identity_element<T>(p.op(), k, n);
  p.assign_parameters(flat);
}

// Max relative error between plugin-parameter gradients from backward() and
// central differences of the joint model's masked loss. Also reports whether
// any tape node of a base parameter carried a gradient, and whether a ReLU or
// pooling kink lies within h of the point (differences at h and h/2 disagree).
struct JointGradCheck {
  double max_error = 0;
  bool base_grad_allocated = false;
  bool kink_within_h = false;
};

inline JointGradCheck joint_gradient_check(JointModel<double>& model, const TensorD& x,
                                           const TensorD& pe, const TensorD& target,
                                           const TensorD& mask, LossKind kind,
                                           double h = 1e-3) {
  auto params = model.parameters();
  auto loss_of = [&](Tape<double>& tape) {
    return masked_loss(model.forward(tape, tape.constant(x), tape.constant(pe)), target,
                       mask, kind);
  };
  JointGradCheck out;
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    tape.backward(loss_of(tape));
    for (auto& p : params) {
      analytic.emplace_back(p.tensor->size(), 0.0);
      tape.accumulate_grad(*p.tensor, analytic.back());
    }
    const auto& base = model.base();
    for (std::size_t i = 0; i < base.layers().size(); ++i)
      for (const auto& t : base.layer_params(i)) {
        std::vector<double> g(t.size(), 0.0);
        tape.accumulate_grad(t, g);
        for (double v : g) out.base_grad_allocated |= v != 0.0;
      }
    for (std::size_t id = 0; id < tape.size(); ++id)
      for (std::size_t i = 0; i < base.layers().size(); ++i)
        for (const auto& t : base.layer_params(i))
          if (&tape.value(id) == &t && tape.requires_grad(id)) out.base_grad_allocated = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].tensor->values();
    auto central = [&](std::size_t k, double step) {
      const double saved = values[k];
      values[k] = saved + step;
      Tape<double> up_tape;
      const double up = loss_of(up_tape).value().item();
      values[k] = saved - step;
      Tape<double> down_tape;
      const double down = loss_of(down_tape).value().item();
      values[k] = saved;
      return (up - down) / (2 * step);
    };
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double fd = central(k, h);
      out.kink_within_h |= relative_error(fd, central(k, h / 2)) > 1e-4;
      out.max_error = std::max(out.max_error, relative_error(analytic[i][k], fd));
    }
  }
  return out;
}

}  // namespace plugnet::testing
