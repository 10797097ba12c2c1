#pragma once

#include <string>
#include <vector>

#include "plugnet/autodiff.hpp"
#include "plugnet/layers.hpp"

namespace plugnet {

// Layer-wise feedback-prop: gradient descent on additive offsets to the
// pre-activations at `update_points`, driven by the known-label loss.
struct FbpropConfig {
  std::vector<std::string> update_points = {"conv1"};
  std::size_t iterations = 10;
  double step_size = 0.1;
  Tensor known_mask;
  LossKind loss = LossKind::kBinaryCrossEntropy;
  // Times the step is halved when the final loss ends above the initial one.
  std::size_t max_halvings = 8;

  void validate(const BaseNetwork<float>& base) const;
};

struct FbpropResult {
  Tensor output;
  double initial_loss = 0;
  double final_loss = 0;
  double step_used = 0;
};

// Parameters are only read. Every call starts from fresh zero offsets.
FbpropResult feedback_prop_infer(const BaseNetwork<float>& base, const Tensor& x,
                                 const Tensor& known_targets,
                                 const FbpropConfig& cfg);

}  // namespace plugnet
