#include "plugnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "plugnet/rng.hpp"

namespace plugnet {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_initial >= 0)) throw ConfigError("lr_initial must be >= 0");
  if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be > 0");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw ConfigError("lr_decay_epochs must be strictly increasing");
    }
    if (epochs > 0 && lr_decay_epochs[i] >= epochs) {
      throw ConfigError("lr_decay_epochs must all be < epochs");
    }
  }
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("Adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  if (!unknown_mask.empty()) {
    bool any = false;
    for (float m : unknown_mask) {
      if (m != 0.0f && m != 1.0f) throw ConfigError("unknown_mask must be binary");
      any = any || m == 1.0f;
    }
    if (!any) throw ConfigError("unknown_mask needs at least one nonzero entry");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_initial", c.lr_initial},
          {"lr_decay_epochs", c.lr_decay_epochs},
          {"lr_decay_factor", c.lr_decay_factor},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"loss_kind", to_string(c.loss_kind)},
          {"unknown_mask", c.unknown_mask}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known = {
      "epochs",     "batch_size", "lr_initial", "lr_decay_epochs",
      "lr_decay_factor", "adam_beta1", "adam_beta2", "adam_eps",
      "seed",       "loss_kind",  "unknown_mask"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown train field '" + key + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("lr_initial")) j.at("lr_initial").get_to(c.lr_initial);
    if (j.contains("lr_decay_epochs")) j.at("lr_decay_epochs").get_to(c.lr_decay_epochs);
    if (j.contains("lr_decay_factor")) j.at("lr_decay_factor").get_to(c.lr_decay_factor);
    if (j.contains("adam_beta1")) j.at("adam_beta1").get_to(c.adam_beta1);
    if (j.contains("adam_beta2")) j.at("adam_beta2").get_to(c.adam_beta2);
    if (j.contains("adam_eps")) j.at("adam_eps").get_to(c.adam_eps);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("loss_kind")) {
      try {
        c.loss_kind = parse_loss_kind(j.at("loss_kind").get<std::string>());
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
    if (j.contains("unknown_mask")) j.at("unknown_mask").get_to(c.unknown_mask);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

LossKind default_loss(TaskKind kind) {
  return kind == TaskKind::kMultilabel ? LossKind::kBinaryCrossEntropy
                                       : LossKind::kCrossEntropy;
}

// ---------------------------------------------------------------------------
// Adam and schedule
// ---------------------------------------------------------------------------

void adam_step(const std::vector<NamedParam<float>>& params,
               const std::vector<std::vector<float>>& grads, AdamState& state,
               double lr, const TrainConfig& cfg) {
  if (grads.size() != params.size()) {
    throw Error("adam_step: " + std::to_string(params.size()) + " parameters but " +
                std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].tensor->size()) {
      throw Error("adam_step: gradient shape mismatch at " + params[i].name);
    }
    for (float g : grads[i]) {
      if (!std::isfinite(g)) throw Error("non-finite gradient at " + params[i].name);
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->size(), 0.0);
      state.v.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: state does not match parameters");

  state.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<float> w = params[i].tensor->values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k];
      m[k] = b1 * m[k] + (1 - b1) * g;
      v[k] = b2 * v[k] + (1 - b2) * g * g;
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] = static_cast<float>(w[k] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr_initial;
  for (std::size_t e : cfg.lr_decay_epochs)
    if (e <= epoch) lr *= cfg.lr_decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss},
          {"metrics", metrics.to_json()}};
}

std::string TrainHistory::jsonl() const {
  std::string out;
  for (const auto& r : records) out += r.to_json().dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Task heads
// ---------------------------------------------------------------------------

Var<float> example_loss(Var<float> output, const Example& ex, TaskKind kind,
                        const Tensor& mask, LossKind loss) {
  switch (kind) {
    case TaskKind::kHierarchical:
    case TaskKind::kMultilabel:
      return masked_loss(output, ex.target, mask, loss);
    case TaskKind::kSegmentation: {
      // [C, H, W] logits -> [H*W, C] rows with one-hot pixel targets.
      const Shape& s = output.shape();
      if (s.size() != 3) throw Error("segmentation output must be [C, H, W]");
      const std::size_t classes = s[0];
      const std::size_t pixels = s[1] * s[2];
      if (ex.target.size() != pixels) throw Error("segmentation target size mismatch");
      if (mask.size() != classes) throw Error("segmentation mask size mismatch");
      Var<float> rows = transpose(reshape(output, {classes, pixels}));
      std::vector<float> onehot(pixels * classes, 0.0f);
      std::vector<float> tiled(pixels * classes);
      for (std::size_t p = 0; p < pixels; ++p) {
        onehot[p * classes + static_cast<std::size_t>(ex.target[p])] = 1.0f;
        std::copy(mask.values().begin(), mask.values().end(),
                  tiled.begin() + static_cast<std::ptrdiff_t>(p * classes));
      }
      return masked_loss(rows, Tensor({pixels, classes}, std::move(onehot)),
                         Tensor({pixels, classes}, std::move(tiled)), loss);
    }
  }
  throw Error("unknown task kind");
}

std::string primary_metric(TaskKind kind) {
  switch (kind) {
    case TaskKind::kHierarchical: return "mc_acc";
    case TaskKind::kMultilabel: return "map";
    case TaskKind::kSegmentation: return "mean_iou";
  }
  return "mc_acc";
}

std::vector<std::string> default_metrics(TaskKind kind) {
  switch (kind) {
    case TaskKind::kHierarchical: return {"mc_acc", "iou_acc"};
    case TaskKind::kMultilabel: return {"map"};
    case TaskKind::kSegmentation: return {"mean_iou", "mc_acc"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

using ForwardFn = std::function<Var<float>(Tape<float>&, const Example&)>;
using EvalFn = std::function<MetricsReport(const Dataset&)>;

void check_loss_kind(TaskKind kind, LossKind loss) {
  const bool ok = kind == TaskKind::kMultilabel ? loss == LossKind::kBinaryCrossEntropy
                                                : loss == LossKind::kCrossEntropy;
  if (!ok) {
    throw ConfigError("loss kind " + to_string(loss) + " does not fit a " +
                      to_string(kind) + " task");
  }
}

Tensor resolve_mask(const TrainConfig& cfg, const Tensor& fallback) {
  if (cfg.unknown_mask.empty()) return fallback;
  if (cfg.unknown_mask.size() != fallback.size()) {
    throw ConfigError("unknown_mask has " + std::to_string(cfg.unknown_mask.size()) +
                      " entries, the task has " + std::to_string(fallback.size()) +
                      " output labels");
  }
  return Tensor({cfg.unknown_mask.size()}, cfg.unknown_mask);
}

TrainHistory run_training(const std::vector<NamedParam<float>>& params,
                          const ForwardFn& forward, const EvalFn& eval,
                          const Dataset& train, const Dataset& val,
                          const Tensor& mask, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error("empty training set");
  if (val.empty()) throw Error("empty validation set");
  check_loss_kind(train.kind, cfg.loss_kind);

  TrainHistory history;
  const std::string metric = primary_metric(train.kind);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_values;

  AdamState adam;
  std::vector<std::vector<float>> grads(params.size());
  std::vector<std::size_t> order(train.size());
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "shuffle");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(shuffle_seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t i = 0; i < params.size(); ++i)
        grads[i].assign(params[i].tensor->size(), 0.0f);
      for (std::size_t b = start; b < end; ++b) {
        const Example& ex = train.examples[order[b]];
        Tape<float> tape;
        Var<float> loss = example_loss(forward(tape, ex), ex, train.kind, mask,
                                       cfg.loss_kind);
        loss_sum += loss.value().item();
        tape.backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i)
          tape.accumulate_grad(*params[i].tensor, grads[i]);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& g : grads)
        for (float& v : g) v *= inv;
      adam_step(params, grads, adam, lr, cfg);
    }

    EpochRecord record{epoch, lr, loss_sum / static_cast<double>(train.size()),
                       eval(val)};
    const double score = record.metrics.at(metric);
    if (score > best) {
      best = score;
      history.best_epoch = static_cast<long>(epoch);
      best_values.clear();
      for (const auto& p : params)
        best_values.emplace_back(p.tensor->values().begin(), p.tensor->values().end());
    }
    history.records.push_back(std::move(record));
  }

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(best_values[i].begin(), best_values[i].end(),
                params[i].tensor->values().begin());
  }
  return history;
}

}  // namespace

TrainHistory train_base(BaseNetwork<float>& net, const Dataset& train,
                        const Dataset& val, const TrainConfig& cfg) {
  if (net.frozen()) throw Error("cannot train a frozen base network");
  if (train.empty()) throw Error("empty training set");
  const Tensor mask = resolve_mask(cfg, Tensor::full({train.output_labels()}, 1.0f));
  const std::vector<std::string> metrics = {primary_metric(train.kind)};
  return run_training(
      net.parameters(),
      [&](Tape<float>& tape, const Example& ex) {
        return net.forward(tape, tape.leaf(ex.input));
      },
      [&](const Dataset& d) { return evaluate(net, d, metrics); }, train, val,
      mask, cfg);
}

TrainHistory train_plugins(JointModel<float>& model, const Dataset& train,
                           const Dataset& val, const TrainConfig& cfg) {
  if (!model.base().frozen()) throw Error("base must be frozen");
  if (train.empty()) throw Error("empty training set");
  const Tensor mask = resolve_mask(cfg, train.unknown_mask);
  const std::vector<std::string> metrics = {primary_metric(train.kind)};
  return run_training(
      model.parameters(),
      [&](Tape<float>& tape, const Example& ex) {
        return model.forward(tape, tape.leaf(ex.input), tape.leaf(ex.pe));
      },
      [&](const Dataset& d) { return evaluate(model, d, metrics); }, train, val,
      mask, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

MetricsReport evaluate(const BaseNetwork<float>& net, const Dataset& data,
                       const std::vector<std::string>& metrics) {
  std::vector<Tensor> outputs;
  outputs.reserve(data.size());
  for (const Example& ex : data.examples) outputs.push_back(net.forward(ex.input));
  return score_outputs(outputs, data, metrics);
}

MetricsReport evaluate(const JointModel<float>& model, const Dataset& data,
                       const std::vector<std::string>& metrics) {
  std::vector<Tensor> outputs;
  outputs.reserve(data.size());
  for (const Example& ex : data.examples)
    outputs.push_back(model.forward(ex.input, ex.pe));
  return score_outputs(outputs, data, metrics);
}

MetricsReport score_outputs(const std::vector<Tensor>& outputs,
                            const Dataset& data,
                            const std::vector<std::string>& metrics) {
  if (metrics.empty()) throw ConfigError("metric list is empty");
  if (data.empty()) throw Error("cannot evaluate on an empty dataset");
  if (outputs.size() != data.size()) throw Error("one output per example required");

  auto incompatible = [&](const std::string& m) {
    return ConfigError("metric '" + m + "' does not apply to a " +
                       to_string(data.kind) + " task");
  };

  MetricsReport report;
  report.count = data.size();
  for (const std::string& m : metrics) {
    if (m == "mc_acc" || m == "iou_acc") {
      std::vector<std::size_t> pred, target;
      if (data.kind == TaskKind::kHierarchical) {
        for (std::size_t i = 0; i < data.size(); ++i) {
          pred.push_back(argmax(outputs[i].values()));
          target.push_back(argmax(data.examples[i].target.values()));
        }
      } else if (data.kind == TaskKind::kSegmentation && m == "mc_acc") {
        for (std::size_t i = 0; i < data.size(); ++i) {
          const Tensor& out = outputs[i];
          const std::size_t classes = out.dim(0);
          const std::size_t pixels = out.size() / classes;
          std::vector<float> column(classes);
          for (std::size_t p = 0; p < pixels; ++p) {
            for (std::size_t c = 0; c < classes; ++c) column[c] = out[c * pixels + p];
            pred.push_back(argmax(std::span<const float>(column)));
            target.push_back(static_cast<std::size_t>(data.examples[i].target[p]));
          }
        }
      } else {
        throw incompatible(m);
      }
      report.values[m] = m == "mc_acc" ? mc_accuracy(pred, target)
                                       : iou_acc(pred, target, data.fine_per_coarse);
    } else if (m == "map") {
      if (data.kind == TaskKind::kSegmentation) throw incompatible(m);
      std::vector<std::vector<double>> scores;
      std::vector<std::vector<int>> targets;
      for (std::size_t i = 0; i < data.size(); ++i) {
        scores.emplace_back(outputs[i].values().begin(), outputs[i].values().end());
        std::vector<int> t;
        for (float v : data.examples[i].target.values()) t.push_back(v != 0.0f);
        targets.push_back(std::move(t));
      }
      std::vector<std::size_t> cols;
      for (std::size_t c = 0; c < data.unknown_mask.size(); ++c)
        if (data.unknown_mask[c] == 1.0f) cols.push_back(c);
      report.values[m] = mean_ap(scores, targets, cols);
    } else if (m == "mean_iou") {
      if (data.kind != TaskKind::kSegmentation) throw incompatible(m);
      std::vector<std::size_t> pred, target;
      std::size_t classes = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor& out = outputs[i];
        classes = out.dim(0);
        const std::size_t pixels = out.size() / classes;
        std::vector<float> column(classes);
        for (std::size_t p = 0; p < pixels; ++p) {
          for (std::size_t c = 0; c < classes; ++c) column[c] = out[c * pixels + p];
          pred.push_back(argmax(std::span<const float>(column)));
          target.push_back(static_cast<std::size_t>(data.examples[i].target[p]));
        }
      }
      report.values[m] = mean_iou(pred, target, classes);
    } else {
      throw ConfigError("unknown metric '" + m + "'");
    }
  }
  return report;
}

}  // namespace plugnet
