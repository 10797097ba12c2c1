#include "plugnet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "plugnet/checkpoint.hpp"
#include "plugnet/rng.hpp"

namespace plugnet {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ExperimentConfig default_experiment(TaskKind kind) {
  ExperimentConfig c;
  c.task_kind = kind;
  c.generator = default_generator(kind);
  c.base_train.loss_kind = default_loss(kind);
  c.plugin_train.loss_kind = default_loss(kind);
  c.plugin_train.epochs = 5;
  c.plugin_train.lr_decay_epochs = {};
  c.base_train.seed = c.plugin_train.seed = c.seed;
  switch (kind) {
    case TaskKind::kHierarchical:
    case TaskKind::kMultilabel:
      c.base_arch = "toy-cls";
      c.base_train.epochs = 10;
      c.base_train.lr_decay_epochs = {7};
      c.plugins = {PluginSpec{{"fc3"}, {32}, FusionOp::kAdditive}};
      c.attach_variants = {{"conv1"}, {"conv2"}, {"fc1"}, {"fc2"}, {"fc3"}};
      break;
    case TaskKind::kSegmentation:
      c.base_arch = "toy-fcn";
      c.base_train.epochs = 12;
      c.base_train.lr_initial = 3e-3;
      c.base_train.lr_decay_epochs = {9};
      c.plugin_train.epochs = 6;
      c.plugin_train.lr_initial = 3e-3;
      c.plugins = {PluginSpec{{"conv1", "conv2", "conv3", "deconv1", "deconv2"},
                              {32},
                              FusionOp::kAdditive}};
      c.attach_variants = {{"conv1", "conv2", "conv3"},
                           {"conv1", "conv2", "conv3", "deconv1", "deconv2"}};
      break;
  }
  return c;
}

namespace {

nlohmann::json plugin_spec_json(const PluginSpec& s) {
  return {{"attach", s.attach}, {"hidden", s.hidden}, {"op", to_string(s.op)}};
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown " + where + " field '" + key + "'");
  }
}

PluginSpec plugin_spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"attach", "hidden", "op"}, "plugin");
  PluginSpec s;
  if (!j.contains("attach")) throw ConfigError("plugin spec needs 'attach'");
  const auto& a = j.at("attach");
  if (a.is_string()) {
    s.attach = {a.get<std::string>()};
  } else {
    s.attach = a.get<std::vector<std::string>>();
  }
  if (s.attach.empty()) throw ConfigError("plugin spec 'attach' is empty");
  if (j.contains("hidden")) s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  if (j.contains("op")) s.op = parse_fusion_op(j.at("op").get<std::string>());
  return s;
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json plugins = nlohmann::json::array();
  for (const auto& s : c.plugins) plugins.push_back(plugin_spec_json(s));
  return {{"task_kind", to_string(c.task_kind)},
          {"seed", c.seed},
          {"generator", generator_to_json(c.generator)},
          {"base", {{"arch", c.base_arch}, {"train", to_json(c.base_train)}}},
          {"plugins", plugins},
          {"plugin_train", to_json(c.plugin_train)},
          {"fbprop",
           {{"update_points", c.fbprop.update_points},
            {"iterations", c.fbprop.iterations},
            {"step_size", c.fbprop.step_size}}},
          {"attach_variants", c.attach_variants},
          {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"task_kind", "seed", "generator", "base", "plugins", "plugin_train",
                  "fbprop", "attach_variants", "output_dir"},
                 "experiment");
  if (!j.contains("task_kind")) throw ConfigError("experiment needs 'task_kind'");
  try {
    const TaskKind kind = parse_task_kind(j.at("task_kind").get<std::string>());
    ExperimentConfig c = default_experiment(kind);
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.base_train.seed = c.plugin_train.seed = c.seed;
    if (j.contains("generator")) c.generator = generator_from_json(kind, j.at("generator"));
    if (j.contains("base")) {
      const auto& b = j.at("base");
      reject_unknown(b, {"arch", "train"}, "base");
      if (b.contains("arch")) c.base_arch = b.at("arch").get<std::string>();
      if (b.contains("train")) {
        nlohmann::json t = to_json(c.base_train);
        t.update(b.at("train"));
        c.base_train = train_config_from_json(t);
      }
    }
    if (j.contains("plugins")) {
      c.plugins.clear();
      for (const auto& p : j.at("plugins")) c.plugins.push_back(plugin_spec_from_json(p));
    }
    if (j.contains("plugin_train")) {
      nlohmann::json t = to_json(c.plugin_train);
      t.update(j.at("plugin_train"));
      c.plugin_train = train_config_from_json(t);
    }
    if (j.contains("fbprop")) {
      const auto& f = j.at("fbprop");
      reject_unknown(f, {"update_points", "iterations", "step_size"}, "fbprop");
      if (f.contains("update_points"))
        c.fbprop.update_points = f.at("update_points").get<std::vector<std::string>>();
      if (f.contains("iterations")) c.fbprop.iterations = f.at("iterations").get<std::size_t>();
      if (f.contains("step_size")) c.fbprop.step_size = f.at("step_size").get<double>();
    }
    if (j.contains("attach_variants"))
      c.attach_variants =
          j.at("attach_variants").get<std::vector<std::vector<std::string>>>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (c.base_arch != "toy-cls" && c.base_arch != "toy-fcn") {
      throw ConfigError("unknown base architecture '" + c.base_arch + "'");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

TaskData make_data(const ExperimentConfig& cfg) {
  if (task_kind_of(cfg.generator) != cfg.task_kind) {
    throw ConfigError("generator config does not match task kind");
  }
  return generate(cfg.generator, cfg.seed);
}

BaseRun run_base(const ExperimentConfig& cfg, const TaskData& data) {
  const Shape& shape = data.train.input_shape();
  auto net = build_base_network<float>(
      architecture_layers(cfg.base_arch, shape, data.train.output_labels()), shape,
      derive_seed(cfg.seed, "base"));
  BaseRun run;
  run.history = train_base(net, data.train, data.val, cfg.base_train);
  net.freeze();
  run.test = evaluate(net, data.test, default_metrics(data.kind()));
  run.net = std::make_shared<const BaseNetwork<float>>(std::move(net));
  return run;
}

namespace {

// A bad attachment id in an experiment is a configuration error.
AttachmentPoint configured_attachment(const BaseNetwork<float>& base, const std::string& id) {
  try {
    return base.attachment(id);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::vector<PluginNetwork<float>> make_plugins(
    const ExperimentConfig& cfg, const std::vector<PluginSpec>& specs,
    const BaseNetwork<float>& base, std::size_t pe_dim) {
  std::vector<PluginNetwork<float>> plugins;
  const std::uint64_t seed = derive_seed(cfg.seed, "plugin");
  for (const auto& spec : specs) {
    for (const auto& id : spec.attach) {
      plugins.emplace_back(pe_dim, spec.hidden, configured_attachment(base, id), spec.op,
                           derive_seed(seed, static_cast<std::uint64_t>(plugins.size())));
    }
  }
  return plugins;
}

PluginRun run_plugins(const ExperimentConfig& cfg,
                      const std::vector<PluginSpec>& specs,
                      std::shared_ptr<const BaseNetwork<float>> base,
                      const TaskData& data) {
  if (specs.empty()) throw ConfigError("no plugins configured");
  PluginRun run;
  auto plugins = make_plugins(cfg, specs, *base, data.train.pe_dim());
  run.model = std::make_unique<JointModel<float>>(std::move(base), std::move(plugins));
  run.history = train_plugins(*run.model, data.train, data.val, cfg.plugin_train);
  run.test = evaluate(*run.model, data.test, default_metrics(data.kind()));
  return run;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

Sweep parse_sweep(const std::string& name) {
  if (name == "fusion") return Sweep::kFusion;
  if (name == "attach") return Sweep::kAttach;
  if (name == "depth") return Sweep::kDepth;
  throw ConfigError("unknown sweep '" + name + "'");
}

std::string AblationResult::csv() const {
  std::string out = "variant";
  std::vector<std::string> names;
  if (!rows.empty())
    for (const auto& [name, _] : rows.front().test.values) names.push_back(name);
  for (const auto& n : names) out += "," + n;
  for (const auto& n : names) out += ",base_" + n;
  out += "\n";
  char buf[64];
  for (const auto& row : rows) {
    out += row.variant;
    for (const auto& n : names) {
      std::snprintf(buf, sizeof buf, ",%.4f", row.test.at(n));
      out += buf;
    }
    for (const auto& n : names) {
      std::snprintf(buf, sizeof buf, ",%.4f", base_test.at(n));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

AblationResult run_ablation(const ExperimentConfig& cfg, Sweep sweep,
                            const BaseRun& base, const TaskData& data,
                            std::size_t threads) {
  if (cfg.plugins.empty()) throw ConfigError("ablation needs a plugin spec to vary");
  const PluginSpec& proto = cfg.plugins.front();

  std::vector<std::pair<std::string, PluginSpec>> variants;
  switch (sweep) {
    case Sweep::kFusion:
      for (FusionOp op : kAllFusionOps) {
        PluginSpec s = proto;
        s.op = op;
        variants.emplace_back(to_string(op), s);
      }
      break;
    case Sweep::kAttach:
      if (cfg.attach_variants.empty()) throw ConfigError("attach sweep needs attach_variants");
      for (const auto& ids : cfg.attach_variants) {
        PluginSpec s = proto;
        s.attach = ids;
        std::string name;
        for (const auto& id : ids) name += (name.empty() ? "" : "+") + id;
        variants.emplace_back(name, s);
      }
      break;
    case Sweep::kDepth: {
      const std::size_t width = proto.hidden.empty() ? 32 : proto.hidden.front();
      for (std::size_t depth = 0; depth <= 3; ++depth) {
        PluginSpec s = proto;
        s.hidden.assign(depth, width);
        variants.emplace_back(std::to_string(depth), s);
      }
      break;
    }
  }
  // Fail on bad attachment ids before any training starts.
  for (const auto& [_, s] : variants)
    for (const auto& id : s.attach) configured_attachment(*base.net, id);

  AblationResult result;
  result.base_test = base.test;
  result.rows.resize(variants.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < variants.size();) {
      try {
        PluginRun run = run_plugins(cfg, {variants[i].second}, base.net, data);
        result.rows[i] = {variants[i].first, run.test};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, variants.size());
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

// ---------------------------------------------------------------------------
// Bench
// ---------------------------------------------------------------------------

nlohmann::json BenchReport::to_json() const {
  nlohmann::json j = {{"base_forward_median_ms", base_ms},
                      {"joint_forward_median_ms", joint_ms},
                      {"repetitions", repetitions},
                      {"warmup", warmup},
                      {"examples_per_repetition", examples},
                      {"fbprop_iterations", fbprop_iterations}};
  j["fbprop_median_ms"] = std::isnan(fbprop_ms) ? nlohmann::json(nullptr)
                                                : nlohmann::json(fbprop_ms);
  return j;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BenchReport run_bench(const JointModel<float>& model, const Dataset& data,
                      const FbpropSettings& fbprop, std::size_t repetitions,
                      std::size_t warmup) {
  if (repetitions == 0) throw ConfigError("bench needs at least one repetition");
  if (data.empty()) throw Error("bench needs a nonempty dataset");
  const BaseNetwork<float>& base = model.base();
  const std::size_t count = std::min<std::size_t>(data.size(), 16);

  bool with_fbprop = false;
  for (float m : data.known_mask.values()) with_fbprop = with_fbprop || m == 1.0f;
  FbpropConfig fcfg;
  fcfg.update_points = fbprop.update_points;
  fcfg.iterations = fbprop.iterations;
  fcfg.step_size = fbprop.step_size;
  fcfg.known_mask = data.known_mask;
  fcfg.loss = default_loss(data.kind);

  using Clock = std::chrono::steady_clock;
  auto time_ms = [&](auto&& body) {
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < count; ++i) body(data.examples[i]);
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  std::vector<double> base_t, joint_t, fb_t;
  volatile float sink = 0;
  for (std::size_t rep = 0; rep < warmup + repetitions; ++rep) {
    const double b = time_ms([&](const Example& ex) { sink = base.forward(ex.input)[0]; });
    const double j =
        time_ms([&](const Example& ex) { sink = model.forward(ex.input, ex.pe)[0]; });
    double f = 0;
    if (with_fbprop) {
      f = time_ms([&](const Example& ex) {
        sink = feedback_prop_infer(base, ex.input, ex.target, fcfg).output[0];
      });
    }
    if (rep < warmup) continue;
    base_t.push_back(b);
    joint_t.push_back(j);
    fb_t.push_back(f);
  }
  (void)sink;

  BenchReport r;
  r.base_ms = median(base_t);
  r.joint_ms = median(joint_t);
  r.fbprop_ms = with_fbprop ? median(fb_t) : std::nan("");
  r.repetitions = repetitions;
  r.warmup = warmup;
  r.fbprop_iterations = fbprop.iterations;
  r.examples = count;
  return r;
}

std::uint64_t content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t worker_threads() {
  const char* env = std::getenv("PLUGNET_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

}  // namespace plugnet
