#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plugnet/autodiff.hpp"
#include "plugnet/datasets.hpp"
#include "plugnet/layers.hpp"
#include "plugnet/metrics.hpp"
#include "plugnet/plugin.hpp"

namespace plugnet {

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double lr_initial = 1e-3;
  std::vector<std::size_t> lr_decay_epochs = {5, 10};
  double lr_decay_factor = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LossKind loss_kind = LossKind::kCrossEntropy;
  // Over output labels. Empty means "take it from the dataset".
  std::vector<float> unknown_mask;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
// Missing fields take defaults; unknown fields are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

// The loss a task is trained with by default.
LossKind default_loss(TaskKind kind);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

// One bias-corrected Adam update. grads[i] pairs with params[i]. All
// gradients are checked before any parameter moves.
void adam_step(const std::vector<NamedParam<float>>& params,
               const std::vector<std::vector<float>>& grads, AdamState& state,
               double lr, const TrainConfig& cfg);

double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  MetricsReport metrics;  // on the validation split

  nlohmann::json to_json() const;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  // Epoch whose weights were kept; -1 when no epoch ran.
  long best_epoch = -1;

  std::string jsonl() const;
};

// Loss of one model output against one example, restricted to `mask`.
Var<float> example_loss(Var<float> output, const Example& ex, TaskKind kind,
                        const Tensor& mask, LossKind loss);

// The metric used for model selection on each task.
std::string primary_metric(TaskKind kind);
std::vector<std::string> default_metrics(TaskKind kind);

// Trains every parameter of an unfrozen base on all output labels.
TrainHistory train_base(BaseNetwork<float>& net, const Dataset& train,
                        const Dataset& val, const TrainConfig& cfg);

// Trains only plugin parameters; the base is never written.
TrainHistory train_plugins(JointModel<float>& model, const Dataset& train,
                           const Dataset& val, const TrainConfig& cfg);

MetricsReport evaluate(const BaseNetwork<float>& net, const Dataset& data,
                       const std::vector<std::string>& metrics);
MetricsReport evaluate(const JointModel<float>& model, const Dataset& data,
                       const std::vector<std::string>& metrics);
// Metrics from precomputed model outputs, one per example.
MetricsReport score_outputs(const std::vector<Tensor>& outputs,
                            const Dataset& data,
                            const std::vector<std::string>& metrics);

}  // namespace plugnet
