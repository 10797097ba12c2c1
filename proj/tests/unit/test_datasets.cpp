#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <map>
#include <set>

#include "plugnet/datasets.hpp"
#include "plugnet/metrics.hpp"

using namespace plugnet;

namespace {

bool same_examples(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  auto eq = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() &&
           std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  };
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &x = a.examples[i], &y = b.examples[i];
    if (!eq(x.input, y.input) || !eq(x.pe, y.pe) || !eq(x.target, y.target)) return false;
  }
  return true;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// P(x_i is the largest of M coordinates) when x_i has mean a/sigma more than
// the rest, by trapezoid quadrature of phi(u) Phi(u + a/sigma)^(M-1).
double nearest_mean_accuracy(double a_over_sigma, std::size_t m) {
  double total = 0;
  const double step = 1e-3;
  for (double u = -12; u <= 12; u += step) {
    const double phi = std::exp(-u * u / 2) / std::sqrt(2 * M_PI);
    total += phi * std::pow(normal_cdf(u + a_over_sigma), static_cast<double>(m - 1)) * step;
  }
  return 100 * total;
}

HierConfig small_hier() {
  HierConfig c;
  c.n_train = 400;
  c.n_val = 40;
  c.n_test = 80;
  return c;
}

}  // namespace

TEST(TaskKind, NamesRoundTrip) {
  for (auto k : {TaskKind::kHierarchical, TaskKind::kMultilabel, TaskKind::kSegmentation})
    EXPECT_EQ(parse_task_kind(to_string(k)), k);
  try {
    parse_task_kind("regression");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "unknown task kind 'regression'");
  }
}

TEST(GeneratorConfig, JsonRoundTripAndUnknownField) {
  for (auto k : {TaskKind::kHierarchical, TaskKind::kMultilabel, TaskKind::kSegmentation}) {
    const auto cfg = default_generator(k);
    const auto j = generator_to_json(cfg);
    EXPECT_EQ(generator_to_json(generator_from_json(k, j)), j);
    auto bad = j;
    bad["colour"] = 3;
    EXPECT_THROW(generator_from_json(k, bad), ConfigError);
  }
  EXPECT_THROW(generator_from_json(TaskKind::kHierarchical, {{"coarse", 1}}), ConfigError);
  EXPECT_THROW(generator_from_json(TaskKind::kMultilabel, {{"flip", 0.7}}), ConfigError);
  EXPECT_THROW(generator_from_json(TaskKind::kHierarchical, {{"noise", "loud"}}), ConfigError);
}

TEST(Hierarchical, ShapesAndBalancedClasses) {
  const TaskData d = gen_hierarchical(small_hier(), 3);
  EXPECT_EQ(d.train.size(), 400u);
  EXPECT_EQ(d.train.input_shape(), (Shape{1, 2, 4}));
  EXPECT_EQ(d.train.pe_dim(), 4u);
  std::map<std::size_t, int> counts;
  for (const auto& ex : d.train.examples) {
    const std::size_t cls = argmax(ex.target.values());
    ++counts[cls];
    // pe is the coarse group of the fine class
    EXPECT_EQ(ex.pe[cls / 4], 1.0f);
    EXPECT_EQ(std::accumulate(ex.pe.values().begin(), ex.pe.values().end(), 0.0f), 1.0f);
  }
  EXPECT_EQ(counts.size(), 16u);
  for (auto [cls, n] : counts) EXPECT_EQ(n, 25) << cls;
}

TEST(Hierarchical, AliasedGroupsShareInputDistribution) {
  HierConfig c;
  c.n_train = 8000;
  const TaskData d = gen_hierarchical(c, 5);
  const std::size_t m = c.fine_per_coarse;
  // per (group, fine index, coordinate): sum, sum of squares, count
  std::vector<double> s(c.classes() * c.input_dim), s2(s.size());
  std::vector<double> n(c.classes());
  for (const auto& ex : d.train.examples) {
    const std::size_t cls = argmax(ex.target.values());
    n[cls] += 1;
    for (std::size_t k = 0; k < c.input_dim; ++k) {
      s[cls * c.input_dim + k] += ex.input[k];
      s2[cls * c.input_dim + k] += double(ex.input[k]) * ex.input[k];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t g = 1; g < c.coarse; ++g)
      for (std::size_t k = 0; k < c.input_dim; ++k) {
        const std::size_t a = i, b = g * m + i;
        const double ma = s[a * c.input_dim + k] / n[a];
        const double mb = s[b * c.input_dim + k] / n[b];
        const double va = s2[a * c.input_dim + k] / n[a] - ma * ma;
        const double vb = s2[b * c.input_dim + k] / n[b] - mb * mb;
        EXPECT_LE(std::abs(ma - mb), 3 * std::sqrt(va / n[a] + vb / n[b]))
            << "fine " << i << " group " << g << " coord " << k;
      }
}

TEST(Hierarchical, OracleWithoutEvidenceIsOneInK) {
  const auto r = bayes_oracle(default_generator(TaskKind::kHierarchical), 20000);
  EXPECT_EQ(r.metric, "mc_acc");
  EXPECT_NEAR(r.without_pe, 25.0, 0.1);
}

TEST(Hierarchical, OracleMatchesQuadrature) {
  for (double noise : {0.5, 2.0, 4.0}) {
    HierConfig c;
    c.noise = noise;
    const auto r = bayes_oracle(c, 100000);
    const double expected = nearest_mean_accuracy(c.separation / std::sqrt(2.0) / noise, 4);
    // Monte-Carlo standard error at 1e5 draws is below 0.16 points
    EXPECT_NEAR(r.with_pe, expected, 0.6) << "noise " << noise;
    EXPECT_NEAR(r.without_pe, r.with_pe / 4, 1e-9);
  }
}

TEST(Hierarchical, LowNoiseOracleAboveNinetyNine) {
  HierConfig c;
  c.noise = 0.125 * c.separation;
  EXPECT_GE(bayes_oracle(c, 50000).with_pe, 99.0);
}

TEST(Multilabel, LabelsCopyFactorsUpToFlips) {
  MultilabelConfig c;
  c.flip = 0;
  c.n_train = 300;
  c.n_val = c.n_test = 10;
  const TaskData d = gen_multilabel(c, 7);
  for (const auto& ex : d.train.examples) {
    for (std::size_t l = 0; l < c.labels(); ++l)
      ASSERT_EQ(ex.target[l], ex.target[l % c.factors]);
    for (std::size_t l = 0; l < c.known_labels; ++l) ASSERT_EQ(ex.pe[l], ex.target[l]);
  }
  EXPECT_EQ(d.train.known_mask[0], 1.0f);
  EXPECT_EQ(d.train.unknown_mask[c.known_labels], 1.0f);
  EXPECT_EQ(d.train.known_mask[c.known_labels], 0.0f);
}

TEST(Multilabel, FlipRateMatchesConfig) {
  MultilabelConfig c;
  c.n_train = 4000;
  c.n_val = c.n_test = 10;
  const TaskData d = gen_multilabel(c, 8);
  double disagree = 0, total = 0;
  for (const auto& ex : d.train.examples)
    for (std::size_t l = c.factors; l < c.labels(); ++l) {
      // l and l - F copy the same factor; they disagree with prob 2 p (1 - p)
      disagree += ex.target[l] != ex.target[l - c.factors];
      total += 1;
    }
  const double expected = 2 * c.flip * (1 - c.flip);
  EXPECT_NEAR(disagree / total, expected, 4 * std::sqrt(expected * (1 - expected) / total));
}

TEST(Multilabel, HalfFlipMakesEvidenceUseless) {
  MultilabelConfig c;
  c.flip = 0.5;
  const auto r = bayes_oracle(c, 5000);
  EXPECT_EQ(r.with_pe, r.without_pe);
}

TEST(Multilabel, NoiselessEvidenceCoveringAllFactorsIsPerfect) {
  MultilabelConfig c;
  c.flip = 0;
  const auto r = bayes_oracle(c, 5000);
  EXPECT_DOUBLE_EQ(r.with_pe, 100.0);
  EXPECT_LT(r.without_pe, 100.0);
}

TEST(Multilabel, ZeroSignalOracleIsChanceLevel) {
  MultilabelConfig c;
  c.signal = 0;
  const auto r = bayes_oracle(c, 20000);
  // constant scores: AP equals the positive rate under the index tiebreak
  // order, which is random with respect to the labels
  const double prevalence = c.factor_prior * (1 - c.flip) + (1 - c.factor_prior) * c.flip;
  EXPECT_NEAR(r.without_pe, 100 * prevalence, 1.5);
  EXPECT_GT(r.with_pe, r.without_pe + 20);
}

TEST(Multilabel, TooManyFactorsRejectedByOracle) {
  MultilabelConfig c;
  c.factors = 17;
  c.height = c.width = 5;
  EXPECT_THROW(bayes_oracle(c, 10), ConfigError);
}

TEST(Segmentation, TargetsMatchEvidenceAndShapes) {
  SegConfig c;
  c.n_train = 300;
  c.n_val = c.n_test = 10;
  const TaskData d = gen_segmentation(c, 9);
  EXPECT_EQ(d.train.output_labels(), c.classes + 1);
  const std::size_t sizes[3] = {25, 9, 13};  // square, plus, diamond
  for (const auto& ex : d.train.examples) {
    std::map<std::size_t, std::size_t> pixels;
    for (float v : ex.target.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, static_cast<float>(c.classes));
      ++pixels[static_cast<std::size_t>(v)];
    }
    std::size_t present = 0;
    for (std::size_t k = 1; k <= c.classes; ++k) {
      const bool in_target = pixels.count(k) > 0;
      ASSERT_EQ(ex.pe[k - 1] == 1.0f, in_target) << "class " << k;
      if (!in_target) continue;
      ++present;
      // Non-overlapping boxes keep every shape whole.
      ASSERT_EQ(pixels[k], sizes[((k - 1) / 2) % 3]);
    }
    ASSERT_GE(present, c.min_shapes);
    ASSERT_LE(present, c.max_shapes);
    // at most one class per group
    std::set<std::size_t> groups;
    for (std::size_t k = 1; k <= c.classes; ++k)
      if (pixels.count(k)) {
        ASSERT_TRUE(groups.insert((k - 1) / 2).second);
      }
  }
}

TEST(Segmentation, PairedClassesShareIntensity) {
  SegConfig c;
  c.noise = 0;
  c.n_train = 200;
  c.n_val = c.n_test = 10;
  const TaskData d = gen_segmentation(c, 10);
  std::map<std::size_t, std::set<float>> seen;
  for (const auto& ex : d.train.examples)
    for (std::size_t i = 0; i < ex.target.size(); ++i)
      seen[static_cast<std::size_t>(ex.target[i])].insert(ex.input[i]);
  for (auto& [cls, values] : seen) EXPECT_EQ(values.size(), 1u) << cls;
  EXPECT_EQ(*seen[1].begin(), *seen[2].begin());
  EXPECT_EQ(*seen[3].begin(), *seen[4].begin());
  EXPECT_NE(*seen[1].begin(), *seen[3].begin());
  EXPECT_EQ(*seen[0].begin(), 0.0f);
}

TEST(Segmentation, OracleIsRejected) {
  EXPECT_THROW(bayes_oracle(default_generator(TaskKind::kSegmentation), 10), ConfigError);
}

TEST(Generators, SameSeedIsBitIdentical) {
  for (auto k : {TaskKind::kHierarchical, TaskKind::kMultilabel, TaskKind::kSegmentation}) {
    GeneratorConfig cfg = default_generator(k);
    std::visit(
        [](auto& c) {
          c.n_train = 50;
          c.n_val = 10;
          c.n_test = 10;
        },
        cfg);
    const TaskData a = generate(cfg, 42), b = generate(cfg, 42), other = generate(cfg, 43);
    EXPECT_TRUE(same_examples(a.train, b.train));
    EXPECT_TRUE(same_examples(a.test, b.test));
    EXPECT_FALSE(same_examples(a.train, other.train));
    EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  }
}

TEST(Generators, SplitsAreIndependentStreams) {
  HierConfig c = small_hier();
  c.n_val = c.n_test = c.n_train;
  const TaskData d = gen_hierarchical(c, 11);
  EXPECT_FALSE(same_examples(d.train, d.val));
  EXPECT_FALSE(same_examples(d.val, d.test));
}

TEST(DatasetFile, RoundTrip) {
  MultilabelConfig c;
  c.n_train = 30;
  c.n_val = 5;
  c.n_test = 7;
  const TaskData d = gen_multilabel(c, 12);
  const std::string bytes = encode_dataset(d);
  EXPECT_EQ(bytes.substr(0, 4), "PLDS");
  const TaskData back = decode_dataset(bytes);
  EXPECT_EQ(back.kind(), TaskKind::kMultilabel);
  EXPECT_EQ(back.seed, 12u);
  EXPECT_TRUE(same_examples(back.train, d.train));
  EXPECT_TRUE(same_examples(back.val, d.val));
  EXPECT_TRUE(same_examples(back.test, d.test));
  EXPECT_EQ(encode_dataset(back), bytes);
  const auto prov = dataset_provenance(d);
  EXPECT_EQ(prov.at("task_kind"), "multilabel");
  EXPECT_EQ(prov.at("splits").at("test"), 7);
}

TEST(DatasetFile, RejectsDamage) {
  const TaskData d = gen_hierarchical(small_hier(), 13);
  std::string bytes = encode_dataset(d);
  EXPECT_THROW(decode_dataset("JUNK" + bytes.substr(4)), Error);
  std::string cut = bytes.substr(0, bytes.size() - 4);
  EXPECT_THROW(decode_dataset(cut), Error);
}

TEST(TaskData, SplitByName) {
  const TaskData d = gen_hierarchical(small_hier(), 14);
  EXPECT_EQ(&d.split("val"), &d.val);
  EXPECT_THROW(d.split("holdout"), ConfigError);
}
