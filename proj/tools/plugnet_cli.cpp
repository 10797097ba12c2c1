// plugnet: dataset generation, base/plugin training, evaluation, ablations
// and timing from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "plugnet/checkpoint.hpp"
#include "plugnet/experiment.hpp"

namespace fs = std::filesystem;
using namespace plugnet;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, text);
}

ExperimentConfig read_config(const std::string& path, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = load_experiment(path);
  if (seed) {
    cfg.seed = *seed;
    cfg.base_train.seed = cfg.plugin_train.seed = *seed;
  }
  return cfg;
}

// Accepts the dataset file or the directory gen-data wrote it to.
TaskData read_data(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "dataset.bin" : path;
  return load_dataset(file);
}

std::vector<PluginNetwork<float>> read_plugins(const std::vector<std::string>& paths) {
  std::vector<PluginNetwork<float>> plugins;
  for (const auto& p : paths) plugins.push_back(load_plugin_checkpoint(p));
  return plugins;
}

int cmd_gen_data(const std::string& config, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  const ExperimentConfig cfg = read_config(config, seed);
  const TaskData data = make_data(cfg);
  fs::create_directories(out);
  save_dataset(data, fs::path(out) / "dataset.bin");
  write_text(fs::path(out) / "dataset.json", dataset_provenance(data).dump(2) + "\n");
  std::cout << "wrote " << (fs::path(out) / "dataset.bin").string() << " ("
            << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " examples)\n";
  return 0;
}

int cmd_train_base(const std::string& config, const std::string& data_path,
                   const std::string& out, std::optional<std::uint64_t> seed) {
  const ExperimentConfig cfg = read_config(config, seed);
  const TaskData data = read_data(data_path);
  if (data.kind() != cfg.task_kind) throw ConfigError("dataset task kind differs from config");
  const BaseRun run = run_base(cfg, data);
  const fs::path dir(out);
  fs::create_directories(dir);
  save_checkpoint(*run.net, dir / "base.ckpt");
  write_text(dir / "base_history.jsonl", run.history.jsonl());
  write_text(dir / "base_metrics.json", run.test.to_json().dump(2) + "\n");
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::cout << "base test " << run.test.to_json().dump() << "\n";
  return 0;
}

int cmd_train_plugin(const std::string& config, const std::string& base_path,
                     const std::string& data_path, const std::string& out,
                     std::optional<std::uint64_t> seed) {
  const ExperimentConfig cfg = read_config(config, seed);
  const TaskData data = read_data(data_path);
  if (data.kind() != cfg.task_kind) throw ConfigError("dataset task kind differs from config");

  const std::uint64_t before = content_hash(read_file(base_path));
  auto base = std::make_shared<const BaseNetwork<float>>(load_checkpoint(base_path));
  if (!base->frozen()) throw Error("base must be frozen");
  const MetricsReport base_test = evaluate(*base, data.test, default_metrics(data.kind()));
  PluginRun run = run_plugins(cfg, cfg.plugins, base, data);
  const std::uint64_t after = content_hash(read_file(base_path));
  if (before != after) throw Error("base checkpoint changed during plugin training");

  const fs::path dir(out);
  fs::create_directories(dir);
  const auto& plugins = run.model->plugins();
  for (std::size_t k = 0; k < plugins.size(); ++k)
    save_plugin_checkpoint(plugins[k], dir / ("plugin_" + std::to_string(k) + ".ckpt"));
  write_text(dir / "plugin_history.jsonl", run.history.jsonl());
  nlohmann::json metrics = {{"joint", run.test.to_json()},
                            {"base", base_test.to_json()},
                            {"base_hash_before", before},
                            {"base_hash_after", after}};
  write_text(dir / "plugin_metrics.json", metrics.dump(2) + "\n");
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::cout << "joint test " << run.test.to_json().dump() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& base_path, const std::vector<std::string>& plugin_paths,
                 const std::string& data_path, const std::string& split,
                 std::vector<std::string> metrics, const std::string& out) {
  const TaskData data = read_data(data_path);
  const Dataset& d = data.split(split);
  if (metrics.empty()) metrics = default_metrics(data.kind());
  auto base = std::make_shared<const BaseNetwork<float>>(load_checkpoint(base_path));
  const MetricsReport report =
      plugin_paths.empty()
          ? evaluate(*base, d, metrics)
          : evaluate(JointModel<float>(base, read_plugins(plugin_paths)), d, metrics);
  const std::string text = report.to_json().dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& sweep_name,
               const std::string& data_path, const std::string& out,
               std::optional<std::uint64_t> seed) {
  const Sweep sweep = parse_sweep(sweep_name);
  const ExperimentConfig cfg = read_config(config, seed);
  const TaskData data = data_path.empty() ? make_data(cfg) : read_data(data_path);
  if (data.kind() != cfg.task_kind) throw ConfigError("dataset task kind differs from config");
  const BaseRun base = run_base(cfg, data);
  const AblationResult result = run_ablation(cfg, sweep, base, data, worker_threads());
  const std::string csv = result.csv();
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return 0;
}

int cmd_bench(const std::string& base_path, const std::vector<std::string>& plugin_paths,
              const std::string& data_path, const std::string& config,
              std::size_t fbprop_t, std::size_t reps, const std::string& out) {
  FbpropSettings fb;
  if (!config.empty()) fb = load_experiment(config).fbprop;
  fb.iterations = fbprop_t;
  const TaskData data = read_data(data_path);
  auto base = std::make_shared<const BaseNetwork<float>>(load_checkpoint(base_path));
  const JointModel<float> model(base, read_plugins(plugin_paths));
  const BenchReport report = run_bench(model, data.test, fb, reps, 5);
  const std::string text = report.to_json().dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plugnet: side networks that condition a frozen model on known labels"};
  app.require_subcommand(1);

  std::string config, out, data, base, split = "test", sweep;
  std::vector<std::string> plugins, metrics;
  std::optional<std::uint64_t> seed;
  std::size_t fbprop_t = 10, reps = 30;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Experiment config (JSON)")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", seed, "Override the config seed");

  auto* tb = app.add_subcommand("train-base", "Train and freeze a base network");
  tb->add_option("--config", config, "Experiment config (JSON)")->required();
  tb->add_option("--data", data, "dataset.bin or its directory")->required();
  tb->add_option("--out", out, "Output directory")->required();
  tb->add_option("--seed", seed, "Override the config seed");

  auto* tp = app.add_subcommand("train-plugin", "Train plugins on a frozen base");
  tp->add_option("--config", config, "Experiment config (JSON)")->required();
  tp->add_option("--base", base, "Base checkpoint")->required();
  tp->add_option("--data", data, "dataset.bin or its directory")->required();
  tp->add_option("--out", out, "Output directory")->required();
  tp->add_option("--seed", seed, "Override the config seed");

  auto* ev = app.add_subcommand("evaluate", "Evaluate a base or joint model");
  ev->add_option("--base", base, "Base checkpoint")->required();
  ev->add_option("--plugin", plugins, "Plugin checkpoint (repeatable)");
  ev->add_option("--data", data, "dataset.bin or its directory")->required();
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--metric", metrics, "mc_acc, map, iou_acc or mean_iou (repeatable)");
  ev->add_option("--out", out, "Write metrics JSON here instead of stdout");

  auto* ab = app.add_subcommand("ablate", "Fusion, attachment or depth sweep");
  ab->add_option("--config", config, "Experiment config (JSON)")->required();
  ab->add_option("--sweep", sweep, "fusion, attach or depth")->required();
  ab->add_option("--data", data, "dataset.bin or its directory (generated if absent)");
  ab->add_option("--out", out, "Write the CSV table here instead of stdout");
  ab->add_option("--seed", seed, "Override the config seed");

  auto* bn = app.add_subcommand("bench", "Inference timing: base, joint, feedback-prop");
  bn->add_option("--base", base, "Base checkpoint")->required();
  bn->add_option("--plugin", plugins, "Plugin checkpoint (repeatable)")->required();
  bn->add_option("--data", data, "dataset.bin or its directory")->required();
  bn->add_option("--config", config, "Experiment config for feedback-prop settings");
  bn->add_option("--fbprop-T", fbprop_t, "Feedback-prop iterations");
  bn->add_option("--reps", reps, "Timed repetitions");
  bn->add_option("--out", out, "Write the report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(config, out, seed);
    if (*tb) return cmd_train_base(config, data, out, seed);
    if (*tp) return cmd_train_plugin(config, base, data, out, seed);
    if (*ev) return cmd_evaluate(base, plugins, data, split, metrics, out);
    if (*ab) return cmd_ablate(config, sweep, data, out, seed);
    if (*bn) return cmd_bench(base, plugins, data, config, fbprop_t, reps, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
