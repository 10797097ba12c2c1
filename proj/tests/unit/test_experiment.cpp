#include <gtest/gtest.h>

#include <cstdlib>

#include "plugnet/checkpoint.hpp"
#include "plugnet/experiment.hpp"

using namespace plugnet;

namespace {

// Hierarchical experiment small enough to train in well under a second.
ExperimentConfig tiny(TaskKind kind = TaskKind::kHierarchical) {
  nlohmann::json j = {{"task_kind", to_string(kind)}, {"seed", 3}};
  if (kind == TaskKind::kSegmentation) {
    j["generator"] = {{"n_train", 40}, {"n_val", 8}, {"n_test", 8}};
    j["plugins"] = {{{"attach", {"conv1", "deconv1"}}, {"hidden", {8}}}};
  } else {
    j["generator"] = {{"n_train", 160}, {"n_val", 32}, {"n_test", 32}};
    j["plugins"] = {{{"attach", "fc3"}, {"hidden", {8}}}};
  }
  j["base"] = {{"train", {{"epochs", 1}, {"lr_decay_epochs", nlohmann::json::array()}}}};
  j["plugin_train"] = {{"epochs", 1}};
  return experiment_from_json(j);
}

}  // namespace

TEST(ExperimentConfig, DefaultsMaterialize) {
  for (auto k : {TaskKind::kHierarchical, TaskKind::kMultilabel, TaskKind::kSegmentation}) {
    const ExperimentConfig c = default_experiment(k);
    const auto j = to_json(c);
    EXPECT_EQ(to_json(experiment_from_json(j)), j);
    EXPECT_EQ(to_json(experiment_from_json({{"task_kind", to_string(k)}})), j);
    EXPECT_TRUE(j.at("plugin_train").contains("lr_decay_factor"));
  }
}

TEST(ExperimentConfig, Errors) {
  EXPECT_THROW(experiment_from_json(nlohmann::json::object()), ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "ranking"}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "hierarchical"}, {"epochs", 3}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "hierarchical"},
                                     {"plugins", {{{"attach", "fc1"}, {"op", "gated"}}}}}),
               ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "hierarchical"},
                                     {"plugins", {{{"hidden", {4}}}}}}),
               ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "hierarchical"}, {"base", {{"arch", "vgg"}}}}),
               ConfigError);
  EXPECT_THROW(experiment_from_json({{"task_kind", "hierarchical"}, {"seed", "one"}}),
               ConfigError);
  EXPECT_THROW(load_experiment("/nonexistent/plugnet.json"), ConfigError);
}

TEST(ExperimentConfig, SeedPropagatesUnlessTrainSectionSetsOne) {
  auto c = experiment_from_json({{"task_kind", "multilabel"}, {"seed", 17}});
  EXPECT_EQ(c.base_train.seed, 17u);
  EXPECT_EQ(c.plugin_train.seed, 17u);
  c = experiment_from_json(
      {{"task_kind", "multilabel"}, {"seed", 17}, {"plugin_train", {{"seed", 4}}}});
  EXPECT_EQ(c.base_train.seed, 17u);
  EXPECT_EQ(c.plugin_train.seed, 4u);
}

TEST(ExperimentConfig, TrainSectionsMergeOverDefaults) {
  auto c = experiment_from_json({{"task_kind", "segmentation"}, {"plugin_train", {{"epochs", 2}}}});
  EXPECT_EQ(c.plugin_train.epochs, 2u);
  EXPECT_DOUBLE_EQ(c.plugin_train.lr_initial, 3e-3);
}

TEST(MakePlugins, AffineDoublesWidthAndSeedsDiffer) {
  ExperimentConfig cfg = tiny();
  const TaskData data = make_data(cfg);
  auto net = build_base_network(architecture_layers("toy-cls", data.train.input_shape(), 16),
                                data.train.input_shape(), 1);
  PluginSpec spec{{"conv2", "fc1"}, {8}, FusionOp::kAffine};
  auto plugins = make_plugins(cfg, {spec}, net, 4);
  ASSERT_EQ(plugins.size(), 2u);
  EXPECT_EQ(plugins[0].output_dim(), 2 * 16u);
  EXPECT_EQ(plugins[1].output_dim(), 2 * 64u);
  EXPECT_NE(plugins[0].weight(0).values()[0], plugins[1].weight(0).values()[0]);
  PluginSpec bad{{"relu1"}, {8}, FusionOp::kAdditive};
  EXPECT_THROW(make_plugins(cfg, {bad}, net, 4), ConfigError);
}

TEST(Runs, BaseThenPluginsKeepBaseBytes) {
  const ExperimentConfig cfg = tiny();
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  EXPECT_TRUE(base.net->frozen());
  const std::string before = serialize_checkpoint(*base.net);
  const PluginRun run = run_plugins(cfg, cfg.plugins, base.net, data);
  EXPECT_EQ(serialize_checkpoint(*base.net), before);
  EXPECT_EQ(run.history.records.size(), 1u);
  EXPECT_TRUE(run.test.values.count("mc_acc"));
  EXPECT_TRUE(run.test.values.count("iou_acc"));
}

TEST(Runs, SegmentationEndToEnd) {
  const ExperimentConfig cfg = tiny(TaskKind::kSegmentation);
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const PluginRun run = run_plugins(cfg, cfg.plugins, base.net, data);
  EXPECT_EQ(run.model->plugins().size(), 2u);
  EXPECT_TRUE(run.test.values.count("mean_iou"));
}

TEST(Runs, SameSeedSameMetricsJson) {
  const ExperimentConfig cfg = tiny();
  auto once = [&] {
    const TaskData data = make_data(cfg);
    const BaseRun base = run_base(cfg, data);
    const PluginRun run = run_plugins(cfg, cfg.plugins, base.net, data);
    return base.history.jsonl() + base.test.to_json().dump() + run.history.jsonl() +
           run.test.to_json().dump();
  };
  EXPECT_EQ(once(), once());
}

TEST(Ablation, FusionSweepRowsAndCsv) {
  const ExperimentConfig cfg = tiny();
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const AblationResult serial = run_ablation(cfg, Sweep::kFusion, base, data, 1);
  ASSERT_EQ(serial.rows.size(), 4u);
  EXPECT_EQ(serial.rows[1].variant, "affine");
  const std::string csv = serial.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,iou_acc,mc_acc,base_iou_acc,base_mc_acc");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  // Worker count changes scheduling only.
  EXPECT_EQ(run_ablation(cfg, Sweep::kFusion, base, data, 3).csv(), csv);
}

TEST(Ablation, DepthAndAttachVariants) {
  ExperimentConfig cfg = tiny();
  cfg.attach_variants = {{"conv1"}, {"fc1", "fc2"}};
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const auto depth = run_ablation(cfg, Sweep::kDepth, base, data);
  ASSERT_EQ(depth.rows.size(), 4u);
  EXPECT_EQ(depth.rows[0].variant, "0");
  const auto attach = run_ablation(cfg, Sweep::kAttach, base, data);
  ASSERT_EQ(attach.rows.size(), 2u);
  EXPECT_EQ(attach.rows[1].variant, "fc1+fc2");
  cfg.attach_variants = {{"pool"}};
  EXPECT_THROW(run_ablation(cfg, Sweep::kAttach, base, data), ConfigError);
  EXPECT_THROW(parse_sweep("width"), ConfigError);
}

TEST(Bench, ReportHasMediansAndCounts) {
  ExperimentConfig cfg = tiny(TaskKind::kMultilabel);
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const PluginRun run = run_plugins(cfg, cfg.plugins, base.net, data);
  const BenchReport r = run_bench(*run.model, data.test, cfg.fbprop, 3, 1);
  const auto j = r.to_json();
  for (const char* key : {"base_forward_median_ms", "joint_forward_median_ms",
                          "fbprop_median_ms", "repetitions"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("repetitions"), 3);
  EXPECT_GT(r.base_ms, 0.0);
  EXPECT_GT(r.fbprop_ms, r.base_ms);
}

TEST(Bench, NoKnownLabelsSkipsFbprop) {
  const ExperimentConfig cfg = tiny();
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  JointModel<float> model(base.net, {});
  const auto j = run_bench(model, data.test, cfg.fbprop, 2, 0).to_json();
  EXPECT_TRUE(j.at("fbprop_median_ms").is_null());
}

TEST(ContentHash, FnvReferenceValues) {
  EXPECT_EQ(content_hash(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(content_hash("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(content_hash("foobar"), 0x85944171f73967e8ULL);
}

TEST(WorkerThreads, ReadsEnvironment) {
  ::setenv("PLUGNET_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3u);
  ::setenv("PLUGNET_THREADS", "zero", 1);
  EXPECT_EQ(worker_threads(), 1u);
  ::unsetenv("PLUGNET_THREADS");
  EXPECT_EQ(worker_threads(), 1u);
}
