// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include "plugnet/checkpoint.hpp"
#include "plugnet/experiment.hpp"
#include "../unit/test_util.hpp"

using namespace plugnet;
using plugnet::testing::joint_gradient_check;
using plugnet::testing::make_identity;
using plugnet::testing::random_tensor;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::shared_ptr<const BaseNetwork<float>> frozen(std::vector<LayerSpec> layers, Shape in,
                                                 std::uint64_t seed) {
  auto net = build_base_network(std::move(layers), in, seed);
  net.freeze();
  return std::make_shared<const BaseNetwork<float>>(std::move(net));
}

std::vector<AttachmentPoint> attachment_points(const BaseNetwork<float>& net) {
  std::vector<AttachmentPoint> out;
  for (const auto& l : net.layers())
    if (l.attachable()) out.push_back(net.attachment(l.id));
  return out;
}

// Every plugin training in the run goes through here, so the frozen-base
// check covers all of them.
struct FrozenLedger {
  std::size_t runs = 0;
  std::size_t changed = 0;

  PluginRun plugins(const ExperimentConfig& cfg, const std::vector<PluginSpec>& specs,
                    const BaseRun& base, const TaskData& data) {
    const std::string before = serialize_checkpoint(*base.net);
    PluginRun run = run_plugins(cfg, specs, base.net, data);
    note(before, *base.net);
    return run;
  }

  AblationResult ablation(const ExperimentConfig& cfg, Sweep sweep, const BaseRun& base,
                          const TaskData& data) {
    const std::string before = serialize_checkpoint(*base.net);
    AblationResult r = run_ablation(cfg, sweep, base, data, worker_threads());
    runs += r.rows.size() - 1;
    note(before, *base.net);
    return r;
  }

  void note(const std::string& before, const BaseNetwork<float>& net) {
    ++runs;
    changed += serialize_checkpoint(net) != before;
  }
};

FrozenLedger g_frozen;

// Metric file contents as the CLI writes them.
std::string metric_files(const BaseRun& base, const PluginRun& run) {
  return base.history.jsonl() + base.test.to_json().dump(2) + run.history.jsonl() +
         run.test.to_json().dump(2);
}

std::map<std::uint64_t, std::string> g_hier_metrics;

// ---------------------------------------------------------------------------

Outcome c1_identity_neutrality() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const std::pair<std::vector<LayerSpec>, Shape> nets[] = {
      {toy_cls_layers({1, 4, 4}, 16), {1, 4, 4}},
      {toy_fcn_layers({1, 8, 8}, 6), {1, 8, 8}},
  };
  std::size_t compared = 0;
  for (const auto& [layers, in] : nets) {
    auto base = frozen(layers, in, 11);
    for (FusionOp op : kAllFusionOps) {
      std::vector<PluginNetwork<float>> plugins;
      for (const auto& point : attachment_points(*base)) {
        plugins.emplace_back(6, std::vector<std::size_t>{8}, point, op, 5);
        make_identity(plugins.back());
      }
      JointModel<float> joint(base, std::move(plugins));
      for (int i = 0; i < 100; ++i) {
        const Tensor x = random_tensor<float>(in, rng);
        const Tensor pe = random_tensor<float>({6}, rng);
        o.check(same_bits(joint.forward(x, pe), base->forward(x)),
                to_string(op) + " input " + std::to_string(i));
        ++compared;
      }
    }
  }
  const double secs = seconds_since(t0);
  o.check(secs < 5.0, "runtime");
  o.detail << compared << " inputs bit-exact, " << secs << " s";
  return o;
}

Outcome c2_affine_subsumption() {
  Outcome o;
  Rng rng(102);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + rng.below(8);
    const Tensor zl = random_tensor<float>({c}, rng, 5.0);
    const Tensor zc = random_tensor<float>({c, 1 + rng.below(5), 1 + rng.below(5)}, rng, 5.0);
    const Tensor r = random_tensor<float>({c}, rng, 5.0);
    Tensor ones_r = Tensor::zeros({2 * c});
    for (std::size_t k = 0; k < c; ++k) {
      ones_r[k] = 1.0f;
      ones_r[c + k] = r[k];
    }
    mismatches += !same_bits(fuse_linear(zl, r, FusionOp::kAdditive),
                             fuse_linear(zl, ones_r, FusionOp::kAffine));
    mismatches += !same_bits(fuse_conv(zc, r, FusionOp::kAdditive),
                             fuse_conv(zc, ones_r, FusionOp::kAffine));
  }
  o.check(mismatches == 0, std::to_string(mismatches) + " mismatches");
  o.detail << "1000 pairs, linear and conv, " << mismatches << " mismatches";
  return o;
}

Outcome c3_gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::size_t redraws = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::uint64_t seed = 300 + s;
    auto base = std::make_shared<const BaseNetwork<double>>(
        frozen(toy_cls_layers({1, 4, 4}, 6), {1, 4, 4}, seed)->cast<double>());
    std::vector<PluginNetwork<double>> plugins;
    plugins.emplace_back(4, std::vector<std::size_t>{8}, base->attachment("conv2"),
                         kAllFusionOps[s % 4], seed);
    plugins.emplace_back(4, std::vector<std::size_t>{8}, base->attachment("fc2"),
                         kAllFusionOps[(s + 1) % 4], seed + 1);
    JointModel<double> joint(base, std::move(plugins));
    Rng rng(seed);
    // Points with a kink inside the difference stencil are redrawn; there the
    // central difference does not estimate the gradient.
    plugnet::testing::JointGradCheck res;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const TensorD x = random_tensor({1, 4, 4}, rng);
      TensorD pe = TensorD::zeros({4});
      for (std::size_t k = 0; k < 4; ++k) pe[k] = rng.bernoulli(0.5);
      TensorD target = TensorD::zeros({6});
      target[rng.below(6)] = 1;
      res = joint_gradient_check(joint, x, pe, target, TensorD::full({6}, 1),
                                 LossKind::kCrossEntropy, 1e-3);
      if (!res.kink_within_h) break;
      ++redraws;
    }
    o.check(!res.kink_within_h, "no smooth point, seed " + std::to_string(seed));
    o.check(res.max_error <= 1e-3, "seed " + std::to_string(seed));
    o.check(!res.base_grad_allocated, "base grad on seed " + std::to_string(seed));
    worst = std::max(worst, res.max_error);
  }
  const double secs = seconds_since(t0);
  o.check(secs < 60.0, "runtime");
  o.detail << "max rel err " << worst << " over 5 seeds (" << redraws
           << " non-smooth points redrawn), " << secs << " s";
  return o;
}

Outcome c5_conv_semantics() {
  Outcome o;
  Rng rng(105);
  std::size_t cases = 0;
  for (FusionOp op : kAllFusionOps)
    for (std::size_t c = 1; c <= 4; ++c)
      for (std::size_t h = 1; h <= 5; ++h)
        for (std::size_t w = 1; w <= 5; ++w) {
          const TensorD z = random_tensor({c, h, w}, rng);
          const std::size_t rn = op == FusionOp::kAffine ? 2 * c : c;
          const TensorD r = random_tensor({rn}, rng);
          const TensorD out = fuse_conv(z, r, op);
          bool ok = out.shape() == z.shape();
          for (std::size_t ch = 0; ok && ch < c; ++ch)
            for (std::size_t q = 0; q < h * w; ++q) {
              const double zv = z[ch * h * w + q];
              double want = 0;
              switch (op) {
                case FusionOp::kAdditive: want = zv + r[ch]; break;
                case FusionOp::kAffine: want = r[ch] * zv + r[c + ch]; break;
                case FusionOp::kMultiplicative: want = zv * r[ch]; break;
                case FusionOp::kResidual: want = zv + zv * r[ch]; break;
              }
              ok &= out[ch * h * w + q] == want;
            }
          o.check(ok, to_string(op) + " c=" + std::to_string(c));
          ++cases;
        }
  // Widths at every conv site of both architectures.
  std::size_t sites = 0;
  for (auto base : {frozen(toy_cls_layers({1, 8, 8}, 6), {1, 8, 8}, 1),
                    frozen(toy_fcn_layers({1, 16, 16}, 6), {1, 16, 16}, 1)}) {
    for (std::size_t i = 0; i < base->layers().size(); ++i) {
      if (!base->layers()[i].attachable()) continue;
      const AttachmentPoint point = base->attachment(base->layers()[i].id);
      if (point.site != Site::kConvChannelwise) continue;
      const Shape& z = base->layer_output_shape(i);
      const std::size_t c = z[0];
      for (FusionOp op : kAllFusionOps) {
        const std::size_t want = op == FusionOp::kAffine ? 2 * c : c;
        PluginNetwork<float> p(3, {4}, point, op, 2);
        o.check(required_output_dim(point, op) == want && p.output_dim() == want,
                point.layer_id + " width");
        bool volume_rejected = false;
        try {
          fuse_conv(Tensor::zeros(z), Tensor::zeros({shape_numel(z)}), op);
        } catch (const Error&) {
          volume_rejected = true;
        }
        o.check(volume_rejected || shape_numel(z) == want, point.layer_id + " volume width");
      }
      ++sites;
    }
  }
  o.detail << cases << " exhaustive shapes match loop oracle, " << sites
           << " conv sites use c / 2c";
  return o;
}

Outcome c6_c7_hierarchical(Outcome& c7) {
  Outcome o;
  for (std::uint64_t seed : kSeeds) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg = default_experiment(TaskKind::kHierarchical);
    cfg.seed = cfg.base_train.seed = cfg.plugin_train.seed = seed;
    const TaskData data = make_data(cfg);
    const BaseRun base = run_base(cfg, data);
    const PluginRun run = g_frozen.plugins(cfg, cfg.plugins, base, data);
    const double secs = seconds_since(t0);
    const double b = base.test.at("mc_acc"), j = run.test.at("mc_acc");
    o.check(b >= 20 && b <= 32, "base seed " + std::to_string(seed));
    o.check(j >= 90, "joint seed " + std::to_string(seed));
    o.check(secs < 180, "runtime seed " + std::to_string(seed));
    o.detail << "seed " << seed << ": base " << b << " joint " << j << " (" << secs
             << " s); ";
    g_hier_metrics[seed] = metric_files(base, run);

    const AblationResult ab = g_frozen.ablation(cfg, Sweep::kFusion, base, data);
    double best = 0, additive = 0;
    c7.detail << "seed " << seed << ":";
    for (const auto& row : ab.rows) {
      const double v = row.test.at("mc_acc");
      c7.check(v > b, row.variant + " not above base, seed " + std::to_string(seed));
      best = std::max(best, v);
      if (row.variant == "additive") additive = v;
      c7.detail << " " << row.variant << " " << v;
    }
    c7.check(additive >= best - 1.0, "additive vs best, seed " + std::to_string(seed));
    c7.detail << " (base " << b << "); ";
  }
  return o;
}

Outcome c8_multilabel() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig cfg = default_experiment(TaskKind::kMultilabel);
    cfg.seed = cfg.base_train.seed = cfg.plugin_train.seed = seed;
    const OracleRates oracle = bayes_oracle(cfg.generator);
    const TaskData data = make_data(cfg);
    const BaseRun base = run_base(cfg, data);
    const PluginRun run = g_frozen.plugins(cfg, cfg.plugins, base, data);
    const double j = run.test.at("map");
    const double closed = (j - oracle.without_pe) / (oracle.with_pe - oracle.without_pe);
    o.check(closed >= 0.5, "seed " + std::to_string(seed));
    o.detail << "seed " << seed << ": base " << base.test.at("map") << " joint " << j
             << " oracle " << oracle.without_pe << "/" << oracle.with_pe << " closed "
             << closed << "; ";
  }
  const double secs = seconds_since(t0);
  o.check(secs < 180, "runtime");
  o.detail << secs << " s";
  return o;
}

Outcome c9_segmentation() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig cfg = default_experiment(TaskKind::kSegmentation);
    cfg.seed = cfg.base_train.seed = cfg.plugin_train.seed = seed;
    const TaskData data = make_data(cfg);
    const BaseRun base = run_base(cfg, data);
    std::vector<PluginSpec> conv_only = cfg.plugins;
    conv_only[0].attach = {"conv1", "conv2", "conv3"};
    const PluginRun full = g_frozen.plugins(cfg, cfg.plugins, base, data);
    const PluginRun conv = g_frozen.plugins(cfg, conv_only, base, data);
    const double b = base.test.at("mean_iou");
    const double f = full.test.at("mean_iou"), c = conv.test.at("mean_iou");
    o.check(f >= b + 15, "plus 15, seed " + std::to_string(seed));
    o.check(f >= c, "conv+deconv vs conv, seed " + std::to_string(seed));
    o.detail << "seed " << seed << ": base " << b << " conv " << c << " conv+deconv " << f
             << "; ";
  }
  const double secs = seconds_since(t0);
  o.check(secs < 300, "runtime");
  o.detail << secs << " s";
  return o;
}

Outcome c10_inference_cost() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = default_experiment(TaskKind::kMultilabel);
  auto& gen = std::get<MultilabelConfig>(cfg.generator);
  gen.height = gen.width = 16;
  gen.n_train = 256;
  gen.n_val = 64;
  gen.n_test = 16;
  cfg.base_train.epochs = 1;
  cfg.base_train.lr_decay_epochs = {};
  cfg.plugin_train.epochs = 1;
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const PluginRun run = g_frozen.plugins(cfg, cfg.plugins, base, data);
  FbpropSettings fb = cfg.fbprop;
  fb.iterations = 10;
  const BenchReport r = run_bench(*run.model, data.test, fb, 30, 5);
  const double joint_ratio = r.joint_ms / r.base_ms, fb_ratio = r.fbprop_ms / r.base_ms;
  o.check(joint_ratio <= 1.10, "joint ratio");
  o.check(fb_ratio >= 3.0, "fbprop ratio");
  const double secs = seconds_since(t0);
  o.check(secs < 120, "runtime");
  o.detail << "base " << r.base_ms << " ms, joint " << r.joint_ms << " ms (x" << joint_ratio
           << "), fbprop T=10 " << r.fbprop_ms << " ms (x" << fb_ratio << "), " << secs
           << " s";
  return o;
}

Outcome c11_determinism() {
  Outcome o;
  const std::uint64_t seed = kSeeds[0];
  ExperimentConfig cfg = default_experiment(TaskKind::kHierarchical);
  cfg.seed = cfg.base_train.seed = cfg.plugin_train.seed = seed;
  const TaskData data = make_data(cfg);
  const BaseRun base = run_base(cfg, data);
  const PluginRun run = g_frozen.plugins(cfg, cfg.plugins, base, data);
  const std::string again = metric_files(base, run);
  o.check(g_hier_metrics.count(seed) > 0, "no first run");
  o.check(again == g_hier_metrics[seed], "metric files differ");
  o.detail << "hierarchical seed " << seed << " rerun, " << again.size()
           << " bytes of metrics compared";
  return o;
}

void report(int id, const std::string& name, const Outcome& o, int& failures) {
  std::printf("C%-2d %-26s %s  %s\n", id, name.c_str(), o.pass ? "PASS" : "FAIL",
              o.detail.str().c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

}  // namespace

int main() {
  int failures = 0;
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    try {
      report(id, name, f(), failures);
    } catch (const std::exception& e) {
      Outcome o;
      o.check(false, e.what());
      report(id, name, o, failures);
    }
  };
  guarded(1, "identity neutrality", c1_identity_neutrality);
  guarded(2, "affine subsumption", c2_affine_subsumption);
  guarded(3, "gradient correctness", c3_gradients);
  guarded(5, "conv channel semantics", c5_conv_semantics);
  Outcome c7;
  guarded(6, "hierarchical surrogate", [&] { return c6_c7_hierarchical(c7); });
  if (c7.detail.str().empty()) c7.check(false, "not run");
  report(7, "fusion ablation", c7, failures);
  guarded(8, "multilabel surrogate", c8_multilabel);
  guarded(9, "segmentation surrogate", c9_segmentation);
  guarded(10, "inference cost", c10_inference_cost);
  guarded(11, "determinism", c11_determinism);
  Outcome c4;
  c4.check(g_frozen.runs > 0 && g_frozen.changed == 0, "base bytes changed");
  c4.detail << g_frozen.runs << " plugin trainings, " << g_frozen.changed
            << " changed the base checkpoint";
  report(4, "frozen base", c4, failures);
  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
