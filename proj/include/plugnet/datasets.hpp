#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "plugnet/tensor.hpp"

namespace plugnet {

enum class TaskKind { kHierarchical, kMultilabel, kSegmentation };

std::string to_string(TaskKind kind);
// Throws ConfigError "unknown task kind '<name>'".
TaskKind parse_task_kind(const std::string& name);

/// Fine class (g, i) draws x ~ N(mu_i, noise^2 I). The mean depends only on
/// i, so the K coarse groups are indistinguishable from x alone.
struct HierConfig {
  std::size_t coarse = 4;
  std::size_t fine_per_coarse = 4;
  std::size_t input_dim = 8;
  double separation = 4.0;
  double noise = 0.5;
  std::size_t n_train = 4000;
  std::size_t n_val = 500;
  std::size_t n_test = 1000;

  void validate() const;
  std::size_t classes() const { return coarse * fine_per_coarse; }
  // [1, h, w] with h the largest divisor of input_dim not above its root.
  Shape input_shape() const;
};

/// Binary factors f ~ Bernoulli(factor_prior). Label l is a copy of factor
/// l mod F flipped with probability `flip`. The input is
/// signal * A (2f - 1) + noise * eps for a seeded orthonormal A.
/// The first known_labels labels form the partial evidence.
struct MultilabelConfig {
  std::size_t known_labels = 10;
  std::size_t unknown_labels = 10;
  std::size_t factors = 5;
  double flip = 0.1;
  double factor_prior = 0.3;
  double signal = 0.5;
  double noise = 1.0;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t n_train = 4000;
  std::size_t n_val = 500;
  std::size_t n_test = 1000;

  void validate() const;
  std::size_t labels() const { return known_labels + unknown_labels; }
  Shape input_shape() const { return {1, height, width}; }
};

/// Images with up to max_shapes non-overlapping shapes on a dark background.
/// Classes 2g+1 and 2g+2 share a shape and intensity, so only the partial
/// evidence (class presence) tells them apart.
struct SegConfig {
  std::size_t grid = 16;
  std::size_t classes = 5;  // excluding background
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  double noise = 0.1;
  std::size_t n_train = 2000;
  std::size_t n_val = 200;
  std::size_t n_test = 500;

  void validate() const;
  std::size_t groups() const { return (classes + 1) / 2; }
  Shape input_shape() const { return {1, grid, grid}; }
};

using GeneratorConfig = std::variant<HierConfig, MultilabelConfig, SegConfig>;

TaskKind task_kind_of(const GeneratorConfig& cfg);
// All fields, defaults included.
nlohmann::json generator_to_json(const GeneratorConfig& cfg);
// Missing fields take defaults; unknown fields are a ConfigError.
GeneratorConfig generator_from_json(TaskKind kind, const nlohmann::json& j);
GeneratorConfig default_generator(TaskKind kind);

struct Example {
  Tensor input;
  Tensor pe;
  // hierarchical: one-hot [K*M]; multilabel: {0,1} [L];
  // segmentation: class index per pixel [H, W]
  Tensor target;
};

struct Dataset {
  TaskKind kind = TaskKind::kHierarchical;
  std::vector<Example> examples;
  // Over output labels (fine classes, labels, or per-pixel classes).
  Tensor known_mask;
  Tensor unknown_mask;
  std::size_t fine_per_coarse = 0;  // hierarchical only

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  std::size_t output_labels() const { return unknown_mask.size(); }
  std::size_t pe_dim() const;
  const Shape& input_shape() const;
};

struct TaskData {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  Dataset train;
  Dataset val;
  Dataset test;

  TaskKind kind() const { return task_kind_of(config); }
  const Dataset& split(const std::string& name) const;
};

TaskData gen_hierarchical(const HierConfig& cfg, std::uint64_t seed);
TaskData gen_multilabel(const MultilabelConfig& cfg, std::uint64_t seed);
TaskData gen_segmentation(const SegConfig& cfg, std::uint64_t seed);
TaskData generate(const GeneratorConfig& cfg, std::uint64_t seed);

// "PLDS" | u32 version | u32 header_bytes | header JSON | per split, per
// example: input, pe, target as little-endian f32.
std::string encode_dataset(const TaskData& data);
TaskData decode_dataset(std::string_view bytes);
void save_dataset(const TaskData& data, const std::filesystem::path& path);
TaskData load_dataset(const std::filesystem::path& path);
// Provenance: task kind, seed, generator config, split sizes.
nlohmann::json dataset_provenance(const TaskData& data);

struct OracleRates {
  double without_pe = 0;
  double with_pe = 0;
  std::string metric;
};

// Bayes-optimal metric with and without partial evidence. Hierarchical: MC
// accuracy; multilabel: mAP over unknown labels. Monte-Carlo over `samples`
// draws with exact posteriors. Segmentation is rejected as intractable.
OracleRates bayes_oracle(const GeneratorConfig& cfg,
                         std::size_t samples = 100000,
                         std::uint64_t seed = 7919);

}  // namespace plugnet
