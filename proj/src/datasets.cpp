#include "plugnet/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "plugnet/checkpoint.hpp"
#include "plugnet/metrics.hpp"
#include "plugnet/rng.hpp"

namespace plugnet {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kHierarchical: return "hierarchical";
    case TaskKind::kMultilabel: return "multilabel";
    case TaskKind::kSegmentation: return "segmentation";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "hierarchical") return TaskKind::kHierarchical;
  if (name == "multilabel") return TaskKind::kMultilabel;
  if (name == "segmentation") return TaskKind::kSegmentation;
  throw ConfigError("unknown task kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Config validation and JSON
// ---------------------------------------------------------------------------

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

template <typename C, typename F>
void hier_fields(C& c, F&& f) {
  f("coarse", c.coarse);
  f("fine_per_coarse", c.fine_per_coarse);
  f("input_dim", c.input_dim);
  f("separation", c.separation);
  f("noise", c.noise);
  f("n_train", c.n_train);
  f("n_val", c.n_val);
  f("n_test", c.n_test);
}

template <typename C, typename F>
void multilabel_fields(C& c, F&& f) {
  f("known_labels", c.known_labels);
  f("unknown_labels", c.unknown_labels);
  f("factors", c.factors);
  f("flip", c.flip);
  f("factor_prior", c.factor_prior);
  f("signal", c.signal);
  f("noise", c.noise);
  f("height", c.height);
  f("width", c.width);
  f("n_train", c.n_train);
  f("n_val", c.n_val);
  f("n_test", c.n_test);
}

template <typename C, typename F>
void seg_fields(C& c, F&& f) {
  f("grid", c.grid);
  f("classes", c.classes);
  f("min_shapes", c.min_shapes);
  f("max_shapes", c.max_shapes);
  f("noise", c.noise);
  f("n_train", c.n_train);
  f("n_val", c.n_val);
  f("n_test", c.n_test);
}

template <typename C, typename Visit>
nlohmann::json fields_to_json(const C& c, Visit visit) {
  nlohmann::json j = nlohmann::json::object();
  visit(c, [&](const char* name, const auto& v) { j[name] = v; });
  return j;
}

template <typename C, typename Visit>
C fields_from_json(const nlohmann::json& j, Visit visit) {
  require(j.is_object(), "generator config must be a JSON object");
  C c;
  std::set<std::string> known;
  visit(c, [&](const char* name, auto& v) {
    known.insert(name);
    if (!j.contains(name)) return;
    try {
      j.at(name).get_to(v);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("generator field '") + name +
                        "' has the wrong type");
    }
  });
  for (const auto& [key, _] : j.items())
    require(known.count(key) > 0, "unknown generator field '" + key + "'");
  c.validate();
  return c;
}

}  // namespace

void HierConfig::validate() const {
  require(coarse >= 2 && fine_per_coarse >= 2, "hierarchical: K and M must be >= 2");
  require(fine_per_coarse <= input_dim,
          "hierarchical: fine_per_coarse must not exceed input_dim");
  require(separation > 0, "hierarchical: separation must be > 0");
  require(noise > 0, "hierarchical: noise must be > 0");
}

Shape HierConfig::input_shape() const {
  std::size_t h = 1;
  for (std::size_t k = 1; k * k <= input_dim; ++k)
    if (input_dim % k == 0) h = k;
  return {1, h, input_dim / h};
}

void MultilabelConfig::validate() const {
  require(known_labels >= 1 && unknown_labels >= 1,
          "multilabel: need at least one known and one unknown label");
  require(factors >= 1, "multilabel: factors must be >= 1");
  require(flip >= 0 && flip <= 0.5, "multilabel: flip must be in [0, 0.5]");
  require(factor_prior > 0 && factor_prior < 1,
          "multilabel: factor_prior must be in (0, 1)");
  require(signal >= 0, "multilabel: signal must be >= 0");
  require(noise > 0, "multilabel: noise must be > 0");
  require(height * width >= factors,
          "multilabel: input must have at least as many pixels as factors");
}

void SegConfig::validate() const {
  require(grid >= 8, "segmentation: grid must be >= 8");
  require(classes >= 3, "segmentation: classes must be >= 3");
  require(min_shapes <= max_shapes, "segmentation: min_shapes > max_shapes");
  require(max_shapes <= groups(),
          "segmentation: max_shapes exceeds the number of class groups");
  require(noise >= 0, "segmentation: noise must be >= 0");
  // Worst case placement: boxes laid out row by row.
  const std::size_t per_row = grid / 5;
  require(per_row * per_row >= max_shapes, "segmentation: grid too small");
}

TaskKind task_kind_of(const GeneratorConfig& cfg) {
  return static_cast<TaskKind>(cfg.index());
}

nlohmann::json generator_to_json(const GeneratorConfig& cfg) {
  return std::visit(
      [](const auto& c) -> nlohmann::json {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, HierConfig>) {
          return fields_to_json(c, [](auto& x, auto&& f) { hier_fields(x, f); });
        } else if constexpr (std::is_same_v<C, MultilabelConfig>) {
          return fields_to_json(c, [](auto& x, auto&& f) { multilabel_fields(x, f); });
        } else {
          return fields_to_json(c, [](auto& x, auto&& f) { seg_fields(x, f); });
        }
      },
      cfg);
}

GeneratorConfig generator_from_json(TaskKind kind, const nlohmann::json& j) {
  switch (kind) {
    case TaskKind::kHierarchical:
      return fields_from_json<HierConfig>(
          j, [](auto& x, auto&& f) { hier_fields(x, f); });
    case TaskKind::kMultilabel:
      return fields_from_json<MultilabelConfig>(
          j, [](auto& x, auto&& f) { multilabel_fields(x, f); });
    case TaskKind::kSegmentation:
      return fields_from_json<SegConfig>(
          j, [](auto& x, auto&& f) { seg_fields(x, f); });
  }
  throw ConfigError("unknown task kind");
}

GeneratorConfig default_generator(TaskKind kind) {
  switch (kind) {
    case TaskKind::kHierarchical: return HierConfig{};
    case TaskKind::kMultilabel: return MultilabelConfig{};
    case TaskKind::kSegmentation: return SegConfig{};
  }
  throw ConfigError("unknown task kind");
}

// ---------------------------------------------------------------------------
// Dataset shells
// ---------------------------------------------------------------------------

std::size_t Dataset::pe_dim() const {
  if (examples.empty()) throw Error("empty dataset");
  return examples.front().pe.size();
}

const Shape& Dataset::input_shape() const {
  if (examples.empty()) throw Error("empty dataset");
  return examples.front().input.shape();
}

const Dataset& TaskData::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

namespace {

Dataset empty_split(const GeneratorConfig& cfg) {
  Dataset d;
  d.kind = task_kind_of(cfg);
  std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, HierConfig>) {
          d.unknown_mask = Tensor::full({c.classes()}, 1.0f);
          d.known_mask = Tensor::zeros({c.classes()});
          d.fine_per_coarse = c.fine_per_coarse;
        } else if constexpr (std::is_same_v<C, MultilabelConfig>) {
          std::vector<float> known(c.labels(), 0.0f);
          std::vector<float> unknown(c.labels(), 0.0f);
          for (std::size_t l = 0; l < c.labels(); ++l)
            (l < c.known_labels ? known : unknown)[l] = 1.0f;
          d.known_mask = Tensor({c.labels()}, known);
          d.unknown_mask = Tensor({c.labels()}, unknown);
        } else {
          d.unknown_mask = Tensor::full({c.classes + 1}, 1.0f);
          d.known_mask = Tensor::zeros({c.classes + 1});
        }
      },
      cfg);
  return d;
}

std::array<std::size_t, 3> split_sizes(const GeneratorConfig& cfg) {
  return std::visit(
      [](const auto& c) { return std::array<std::size_t, 3>{c.n_train, c.n_val, c.n_test}; },
      cfg);
}

constexpr const char* kSplitNames[3] = {"train", "val", "test"};

template <typename Fill>
TaskData build(const GeneratorConfig& cfg, std::uint64_t seed, Fill fill) {
  TaskData data{cfg, seed, empty_split(cfg), empty_split(cfg), empty_split(cfg)};
  Dataset* splits[3] = {&data.train, &data.val, &data.test};
  const auto sizes = split_sizes(cfg);
  for (int s = 0; s < 3; ++s) {
    Rng rng(derive_seed(seed, kSplitNames[s]));
    splits[s]->examples.reserve(sizes[s]);
    for (std::size_t i = 0; i < sizes[s]; ++i)
      splits[s]->examples.push_back(fill(rng, i));
  }
  return data;
}

}  // namespace

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

TaskData gen_hierarchical(const HierConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const double scale = cfg.separation / std::sqrt(2.0);
  const Shape shape = cfg.input_shape();
  return build(cfg, seed, [&](Rng& rng, std::size_t index) {
    const std::size_t cls = index % cfg.classes();
    const std::size_t g = cls / cfg.fine_per_coarse;
    const std::size_t i = cls % cfg.fine_per_coarse;
    std::vector<float> x(cfg.input_dim);
    for (std::size_t k = 0; k < cfg.input_dim; ++k)
      x[k] = static_cast<float>((k == i ? scale : 0.0) + cfg.noise * rng.normal());
    std::vector<float> pe(cfg.coarse, 0.0f);
    pe[g] = 1.0f;
    std::vector<float> target(cfg.classes(), 0.0f);
    target[cls] = 1.0f;
    return Example{Tensor(shape, std::move(x)), Tensor({cfg.coarse}, std::move(pe)),
                   Tensor({cfg.classes()}, std::move(target))};
  });
}

namespace {

// Column-orthonormal [rows, cols] matrix (row-major) by Gram-Schmidt on
// Gaussian draws.
std::vector<double> orthonormal_columns(std::size_t rows, std::size_t cols,
                                        Rng& rng) {
  std::vector<double> a(rows * cols);
  for (std::size_t c = 0; c < cols; ++c) {
    for (;;) {
      std::vector<double> v(rows);
      for (double& e : v) e = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0;
        for (std::size_t r = 0; r < rows; ++r) dot += v[r] * a[r * cols + p];
        for (std::size_t r = 0; r < rows; ++r) v[r] -= dot * a[r * cols + p];
      }
      double norm = 0;
      for (double e : v) norm += e * e;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (std::size_t r = 0; r < rows; ++r) a[r * cols + c] = v[r] / norm;
      break;
    }
  }
  return a;
}

}  // namespace

TaskData gen_multilabel(const MultilabelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.height * cfg.width;
  Rng mix_rng(derive_seed(seed, "mixing"));
  const std::vector<double> a = orthonormal_columns(d, cfg.factors, mix_rng);
  return build(cfg, seed, [&](Rng& rng, std::size_t) {
    std::vector<int> f(cfg.factors);
    for (int& v : f) v = rng.bernoulli(cfg.factor_prior);
    std::vector<float> labels(cfg.labels());
    for (std::size_t l = 0; l < cfg.labels(); ++l) {
      const int flipped = rng.bernoulli(cfg.flip);
      labels[l] = static_cast<float>(f[l % cfg.factors] ^ flipped);
    }
    std::vector<float> x(d);
    for (std::size_t r = 0; r < d; ++r) {
      double v = 0;
      for (std::size_t k = 0; k < cfg.factors; ++k)
        v += a[r * cfg.factors + k] * (2.0 * f[k] - 1.0);
      x[r] = static_cast<float>(cfg.signal * v + cfg.noise * rng.normal());
    }
    std::vector<float> pe(labels.begin(), labels.begin() + cfg.known_labels);
    return Example{Tensor(cfg.input_shape(), std::move(x)),
                   Tensor({cfg.known_labels}, std::move(pe)),
                   Tensor({cfg.labels()}, std::move(labels))};
  });
}

namespace {

constexpr std::size_t kBox = 5;

bool shape_covers(std::size_t shape, std::size_t r, std::size_t c) {
  const int dr = std::abs(static_cast<int>(r) - 2);
  const int dc = std::abs(static_cast<int>(c) - 2);
  switch (shape % 3) {
    case 0: return true;                 // square
    case 1: return dr == 0 || dc == 0;   // plus
    default: return dr + dc <= 2;        // diamond
  }
}

}  // namespace

TaskData gen_segmentation(const SegConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = cfg.grid;
  const std::size_t groups = cfg.groups();
  return build(cfg, seed, [&](Rng& rng, std::size_t) {
    std::vector<float> image(n * n, 0.0f);
    std::vector<float> target(n * n, 0.0f);
    std::vector<float> pe(cfg.classes, 0.0f);
    const std::size_t count =
        cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::pair<std::size_t, std::size_t>> boxes;
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t g = order[s];
      const std::size_t members = std::min<std::size_t>(2, cfg.classes - 2 * g);
      const std::size_t cls = 2 * g + 1 + rng.below(members);
      std::size_t top = 0, left = 0;
      for (;;) {
        top = rng.below(n - kBox + 1);
        left = rng.below(n - kBox + 1);
        bool clear = true;
        for (auto [bt, bl] : boxes) {
          const bool apart = top >= bt + kBox || bt >= top + kBox ||
                             left >= bl + kBox || bl >= left + kBox;
          clear = clear && apart;
        }
        if (clear) break;
      }
      boxes.emplace_back(top, left);
      const float intensity =
          groups == 1 ? 1.0f
                      : static_cast<float>(0.4 + 0.6 * static_cast<double>(g) /
                                                     static_cast<double>(groups - 1));
      for (std::size_t r = 0; r < kBox; ++r) {
        for (std::size_t c = 0; c < kBox; ++c) {
          if (!shape_covers(g, r, c)) continue;
          const std::size_t at = (top + r) * n + left + c;
          image[at] = intensity;
          target[at] = static_cast<float>(cls);
        }
      }
      pe[cls - 1] = 1.0f;
    }
    for (float& v : image) v += static_cast<float>(cfg.noise * rng.normal());
    return Example{Tensor({1, n, n}, std::move(image)),
                   Tensor({cfg.classes}, std::move(pe)),
                   Tensor({n, n}, std::move(target))};
  });
}

TaskData generate(const GeneratorConfig& cfg, std::uint64_t seed) {
  return std::visit(
      [&](const auto& c) -> TaskData {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, HierConfig>) return gen_hierarchical(c, seed);
        else if constexpr (std::is_same_v<C, MultilabelConfig>) return gen_multilabel(c, seed);
        else return gen_segmentation(c, seed);
      },
      cfg);
}

// ---------------------------------------------------------------------------
// Binary dataset files
// ---------------------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[4] = {'P', 'L', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i]))
         << (8 * i);
  return v;
}

void put_tensor(std::string& out, const Tensor& t) {
  for (float f : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

}  // namespace

nlohmann::json dataset_provenance(const TaskData& data) {
  const auto sizes = split_sizes(data.config);
  return {{"task_kind", to_string(data.kind())},
          {"seed", data.seed},
          {"generator", generator_to_json(data.config)},
          {"splits", {{"train", sizes[0]}, {"val", sizes[1]}, {"test", sizes[2]}}}};
}

std::string encode_dataset(const TaskData& data) {
  nlohmann::json header = dataset_provenance(data);
  const Dataset& ref = data.train.empty() ? (data.val.empty() ? data.test : data.val)
                                          : data.train;
  if (!ref.empty()) {
    header["input_shape"] = ref.examples.front().input.shape();
    header["pe_shape"] = ref.examples.front().pe.shape();
    header["target_shape"] = ref.examples.front().target.shape();
  }
  const std::string text = header.dump();
  std::string out(kDatasetMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const Dataset* d : {&data.train, &data.val, &data.test}) {
    for (const Example& e : d->examples) {
      put_tensor(out, e.input);
      put_tensor(out, e.pe);
      put_tensor(out, e.target);
    }
  }
  return out;
}

TaskData decode_dataset(std::string_view bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw Error("not a dataset file");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kDatasetVersion) {
    throw Error("unsupported version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) {
    throw Error("payload length mismatch: truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt dataset header: ") + e.what());
  }
  const TaskKind kind = parse_task_kind(header.at("task_kind").get<std::string>());
  const GeneratorConfig cfg = generator_from_json(kind, header.at("generator"));
  TaskData data{cfg, header.at("seed").get<std::uint64_t>(), empty_split(cfg),
                empty_split(cfg), empty_split(cfg)};
  const auto sizes = split_sizes(cfg);
  const std::size_t total = sizes[0] + sizes[1] + sizes[2];
  if (total == 0) return data;

  const Shape in_shape = header.at("input_shape").get<Shape>();
  const Shape pe_shape = header.at("pe_shape").get<Shape>();
  const Shape target_shape = header.at("target_shape").get<Shape>();
  const std::size_t per_example =
      shape_numel(in_shape) + shape_numel(pe_shape) + shape_numel(target_shape);
  const std::string_view payload = bytes.substr(12 + header_len);
  if (payload.size() != 4 * per_example * total) {
    throw Error("payload length mismatch: expected " +
                std::to_string(4 * per_example * total) + " bytes, got " +
                std::to_string(payload.size()));
  }
  std::size_t offset = 0;
  auto read_tensor = [&](const Shape& shape) {
    std::vector<float> values(shape_numel(shape));
    for (float& v : values) {
      v = std::bit_cast<float>(get_u32(payload, offset));
      offset += 4;
    }
    return Tensor(shape, std::move(values));
  };
  Dataset* splits[3] = {&data.train, &data.val, &data.test};
  for (int s = 0; s < 3; ++s) {
    splits[s]->examples.reserve(sizes[s]);
    for (std::size_t i = 0; i < sizes[s]; ++i) {
      Tensor input = read_tensor(in_shape);
      Tensor pe = read_tensor(pe_shape);
      Tensor target = read_tensor(target_shape);
      splits[s]->examples.push_back({std::move(input), std::move(pe), std::move(target)});
    }
  }
  return data;
}

void save_dataset(const TaskData& data, const std::filesystem::path& path) {
  write_file(path, encode_dataset(data));
}

TaskData load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

// ---------------------------------------------------------------------------
// Bayes oracle
// ---------------------------------------------------------------------------

namespace {

OracleRates hier_oracle(const HierConfig& cfg, std::size_t samples, Rng& rng) {
  // Means are axis-aligned, so only the first M coordinates matter for the
  // nearest-mean decision; the rest are pure noise.
  const double scale = cfg.separation / std::sqrt(2.0);
  const std::size_t m = cfg.fine_per_coarse;
  std::size_t hits = 0;
  std::vector<double> x(m);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t i = s % m;
    for (std::size_t k = 0; k < m; ++k)
      x[k] = (k == i ? scale : 0.0) + cfg.noise * rng.normal();
    // ||x - mu_j||^2 = const - 2 scale x_j, so the nearest mean has max x_j.
    hits += argmax(std::span<const double>(x)) == i;
  }
  const double with_pe = 100.0 * static_cast<double>(hits) / static_cast<double>(samples);
  // Without the coarse label the posterior is flat over the K aliased classes
  // sharing the best fine index, so exactly one in K guesses is right.
  return {with_pe / static_cast<double>(cfg.coarse), with_pe, "mc_acc"};
}

OracleRates multilabel_oracle(const MultilabelConfig& cfg, std::size_t samples,
                              Rng& rng) {
  if (cfg.factors > 16) {
    throw ConfigError("multilabel oracle: 2^" + std::to_string(cfg.factors) +
                      " factor states is intractable");
  }
  const std::size_t states = std::size_t{1} << cfg.factors;
  const double sigma2 = cfg.noise * cfg.noise;
  const double log_p1 = std::log(cfg.factor_prior);
  const double log_p0 = std::log1p(-cfg.factor_prior);
  const double log_keep = std::log1p(-cfg.flip);
  const double log_flip = cfg.flip > 0 ? std::log(cfg.flip) : -1e300;

  std::vector<std::vector<double>> scores_without(samples), scores_with(samples);
  std::vector<std::vector<int>> truth(samples);
  std::vector<int> f(cfg.factors), labels(cfg.labels());
  std::vector<double> u(cfg.factors), log_post(states), log_post_pe(states);

  for (std::size_t s = 0; s < samples; ++s) {
    for (int& v : f) v = rng.bernoulli(cfg.factor_prior);
    for (std::size_t l = 0; l < cfg.labels(); ++l)
      labels[l] = f[l % cfg.factors] ^ static_cast<int>(rng.bernoulli(cfg.flip));
    // The input seen through the orthonormal mixing columns; the component
    // orthogonal to them carries no information about f.
    for (std::size_t k = 0; k < cfg.factors; ++k)
      u[k] = cfg.signal * (2.0 * f[k] - 1.0) + cfg.noise * rng.normal();

    for (std::size_t st = 0; st < states; ++st) {
      double lp = 0;
      for (std::size_t k = 0; k < cfg.factors; ++k) {
        const int bit = (st >> k) & 1;
        const double mean = cfg.signal * (2.0 * bit - 1.0);
        lp += (bit ? log_p1 : log_p0) - (u[k] - mean) * (u[k] - mean) / (2 * sigma2);
      }
      log_post[st] = lp;
      for (std::size_t l = 0; l < cfg.known_labels; ++l) {
        const int bit = (st >> (l % cfg.factors)) & 1;
        lp += labels[l] == bit ? log_keep : log_flip;
      }
      log_post_pe[st] = lp;
    }
    auto marginals = [&](std::vector<double>& lp) {
      const double mx = *std::max_element(lp.begin(), lp.end());
      double z = 0;
      for (double& v : lp) z += (v = std::exp(v - mx));
      std::vector<double> p1(cfg.factors, 0.0);
      for (std::size_t st = 0; st < states; ++st)
        for (std::size_t k = 0; k < cfg.factors; ++k)
          if ((st >> k) & 1) p1[k] += lp[st] / z;
      return p1;
    };
    const auto p_without = marginals(log_post);
    const auto p_with = marginals(log_post_pe);
    auto& sw = scores_without[s];
    auto& sp = scores_with[s];
    auto& t = truth[s];
    for (std::size_t l = cfg.known_labels; l < cfg.labels(); ++l) {
      const std::size_t k = l % cfg.factors;
      sw.push_back(cfg.flip + (1 - 2 * cfg.flip) * p_without[k]);
      sp.push_back(cfg.flip + (1 - 2 * cfg.flip) * p_with[k]);
      t.push_back(labels[l]);
    }
  }
  return {mean_ap(scores_without, truth), mean_ap(scores_with, truth), "map"};
}

}  // namespace

OracleRates bayes_oracle(const GeneratorConfig& cfg, std::size_t samples,
                         std::uint64_t seed) {
  if (samples == 0) throw ConfigError("bayes_oracle needs at least one sample");
  Rng rng(derive_seed(seed, "oracle"));
  return std::visit(
      [&](const auto& c) -> OracleRates {
        using C = std::decay_t<decltype(c)>;
        c.validate();
        if constexpr (std::is_same_v<C, HierConfig>) {
          return hier_oracle(c, samples, rng);
        } else if constexpr (std::is_same_v<C, MultilabelConfig>) {
          return multilabel_oracle(c, samples, rng);
        } else {
          throw ConfigError("segmentation Bayes rate is intractable");
        }
      },
      cfg);
}

}  // namespace plugnet
