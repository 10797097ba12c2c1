#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plugnet/datasets.hpp"
#include "plugnet/fbprop.hpp"
#include "plugnet/plugin.hpp"
#include "plugnet/trainer.hpp"

namespace plugnet {

// One plugin per listed attachment id, all with the same shape and operator.
struct PluginSpec {
  std::vector<std::string> attach;
  std::vector<std::size_t> hidden = {32};
  FusionOp op = FusionOp::kAdditive;
};

struct FbpropSettings {
  std::vector<std::string> update_points = {"conv1"};
  std::size_t iterations = 10;
  double step_size = 1.0;
};

struct ExperimentConfig {
  TaskKind task_kind = TaskKind::kHierarchical;
  std::uint64_t seed = 1;
  GeneratorConfig generator = HierConfig{};
  std::string base_arch = "toy-cls";
  TrainConfig base_train;
  std::vector<PluginSpec> plugins;
  TrainConfig plugin_train;
  FbpropSettings fbprop;
  // Attachment sets compared by the "attach" sweep.
  std::vector<std::vector<std::string>> attach_variants;
  std::string output_dir = "runs";
};

// Tuned desk-scale defaults for a task.
ExperimentConfig default_experiment(TaskKind kind);
// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);
// Starts from default_experiment(task_kind) and overrides what is given.
// Throws ConfigError on unknown fields or values.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

TaskData make_data(const ExperimentConfig& cfg);

struct BaseRun {
  std::shared_ptr<const BaseNetwork<float>> net;  // frozen
  TrainHistory history;
  MetricsReport test;
};

// Builds, trains and freezes the base.
BaseRun run_base(const ExperimentConfig& cfg, const TaskData& data);

std::vector<PluginNetwork<float>> make_plugins(
    const ExperimentConfig& cfg, const std::vector<PluginSpec>& specs,
    const BaseNetwork<float>& base, std::size_t pe_dim);

struct PluginRun {
  std::unique_ptr<JointModel<float>> model;
  TrainHistory history;
  MetricsReport test;
};

PluginRun run_plugins(const ExperimentConfig& cfg,
                      const std::vector<PluginSpec>& specs,
                      std::shared_ptr<const BaseNetwork<float>> base,
                      const TaskData& data);

enum class Sweep { kFusion, kAttach, kDepth };
Sweep parse_sweep(const std::string& name);

struct AblationRow {
  std::string variant;
  MetricsReport test;
};

struct AblationResult {
  MetricsReport base_test;
  std::vector<AblationRow> rows;

  std::string csv() const;
};

// One plugin training per variant, all with the experiment seed. Up to
// `threads` variants run at once; rows keep variant order.
AblationResult run_ablation(const ExperimentConfig& cfg, Sweep sweep,
                            const BaseRun& base, const TaskData& data,
                            std::size_t threads = 1);

struct BenchReport {
  double base_ms = 0;
  double joint_ms = 0;
  double fbprop_ms = 0;
  std::size_t repetitions = 0;
  std::size_t warmup = 0;
  std::size_t fbprop_iterations = 0;
  std::size_t examples = 0;

  nlohmann::json to_json() const;
};

// Median wall time per repetition, each repetition running every example in
// `data` once. Modes are interleaved within a repetition.
BenchReport run_bench(const JointModel<float>& model, const Dataset& data,
                      const FbpropSettings& fbprop, std::size_t repetitions = 30,
                      std::size_t warmup = 5);

// FNV-1a over a byte string; used to prove files are untouched.
std::uint64_t content_hash(std::string_view bytes);

// PLUGNET_THREADS when set to a positive integer, else 1.
std::size_t worker_threads();

}  // namespace plugnet
