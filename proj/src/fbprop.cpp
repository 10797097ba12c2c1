#include "plugnet/fbprop.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace plugnet {

void FbpropConfig::validate(const BaseNetwork<float>& base) const {
  if (update_points.empty()) throw ConfigError("fbprop needs at least one update point");
  for (const std::string& id : update_points) {
    const std::size_t i = base.layer_index(id);
    if (!base.layers()[i].attachable()) {
      throw ConfigError("fbprop update point '" + id + "' has no pre-activation");
    }
  }
  if (!std::isfinite(step_size) || step_size < 0) {
    throw ConfigError("fbprop step size must be finite and >= 0");
  }
  if (known_mask.shape() != base.output_shape()) {
    throw ConfigError("fbprop known_mask must have the base output shape " +
                      shape_str(base.output_shape()));
  }
  bool any = false;
  for (float m : known_mask.values()) {
    if (m != 0.0f && m != 1.0f) throw ConfigError("fbprop known_mask must be binary");
    any = any || m == 1.0f;
  }
  if (!any) throw ConfigError("fbprop known_mask is empty");
}

FbpropResult feedback_prop_infer(const BaseNetwork<float>& base, const Tensor& x,
                                 const Tensor& known_targets,
                                 const FbpropConfig& cfg) {
  cfg.validate(base);
  if (known_targets.shape() != base.output_shape()) {
    throw Error("fbprop known targets must have the base output shape");
  }

  std::vector<std::size_t> points;
  for (const std::string& id : cfg.update_points) points.push_back(base.layer_index(id));
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());
  const std::size_t first = points.front();
  const std::size_t depth = base.layers().size();

  // The prefix up to the earliest point never changes; run it once.
  Tensor z_first;
  {
    Tape<float> tape;
    z_first = base.forward_range(tape, tape.leaf(x), 0, first + 1).value();
  }

  std::map<std::size_t, Tensor> offsets;
  auto reset = [&] {
    offsets.clear();
    for (std::size_t i : points)
      offsets.emplace(i, Tensor::zeros(base.layer_output_shape(i), true));
  };
  // One pass from the earliest point with the current offsets applied.
  auto pass = [&](Tape<float>& tape) {
    Var<float> h = add(tape.leaf(z_first), tape.leaf(offsets.at(first)));
    h = base.forward_range(tape, h, first + 1, depth,
                           [&](std::size_t i, Var<float> z) {
                             auto it = offsets.find(i);
                             return it == offsets.end() ? z
                                                        : add(z, tape.leaf(it->second));
                           });
    Var<float> loss = masked_loss(h, known_targets, cfg.known_mask, cfg.loss);
    return std::pair{h, loss};
  };

  FbpropResult result;
  if (cfg.iterations == 0 || cfg.step_size == 0) {
    result.output = base.forward(x);
    return result;
  }

  double eta = cfg.step_size;
  for (std::size_t attempt = 0; attempt <= cfg.max_halvings; ++attempt, eta /= 2) {
    reset();
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      Tape<float> tape;
      auto [out, loss] = pass(tape);
      // Offsets start at zero, so the first pass scores the base prediction.
      if (attempt == 0 && t == 0) {
        result.initial_loss = result.final_loss = loss.value().item();
      }
      tape.backward(loss);
      for (auto& [i, delta] : offsets) {
        std::vector<float> g(delta.size(), 0.0f);
        tape.accumulate_grad(delta, g);
        std::span<float> d = delta.values();
        for (std::size_t k = 0; k < d.size(); ++k)
          d[k] = static_cast<float>(d[k] - eta * g[k]);
      }
    }
    Tape<float> tape;
    auto [out, loss] = pass(tape);
    const double final_loss = loss.value().item();
    if (final_loss <= result.initial_loss) {
      result.output = out.value();
      result.final_loss = final_loss;
      result.step_used = eta;
      return result;
    }
  }
  // No step size helped: keep the unmodified prediction.
  result.output = base.forward(x);
  return result;
}

}  // namespace plugnet
