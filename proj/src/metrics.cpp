#include "plugnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "plugnet/tensor.hpp"

namespace plugnet {

namespace {

template <typename T>
std::size_t argmax_impl(std::span<const T> values) {
  if (values.empty()) throw Error("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

void check_congruent(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(std::string(what) + ": shape mismatch " + std::to_string(a) +
                " vs " + std::to_string(b));
  }
  if (a == 0) throw Error(std::string(what) + ": empty input");
}

}  // namespace

std::size_t argmax(std::span<const float> values) { return argmax_impl(values); }
std::size_t argmax(std::span<const double> values) { return argmax_impl(values); }

double mc_accuracy(std::span<const std::size_t> pred,
                   std::span<const std::size_t> target) {
  check_congruent(pred.size(), target.size(), "mc_accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == target[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pred.size());
}

double average_precision(std::span<const double> scores,
                         std::span<const int> targets) {
  check_congruent(scores.size(), targets.size(), "average_precision");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t positives = 0;
  double sum = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (targets[order[k]] == 0) continue;
    ++positives;
    sum += static_cast<double>(positives) / static_cast<double>(k + 1);
  }
  if (positives == 0) throw Error("average_precision: no positive example");
  return 100.0 * sum / static_cast<double>(positives);
}

double mean_ap(const std::vector<std::vector<double>>& scores,
               const std::vector<std::vector<int>>& targets,
               const std::vector<std::size_t>& classes) {
  check_congruent(scores.size(), targets.size(), "mean_ap");
  const std::size_t width = scores.front().size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != width || targets[i].size() != width) {
      throw Error("mean_ap: ragged score or target rows");
    }
  }
  std::vector<std::size_t> cols = classes;
  if (cols.empty()) {
    cols.resize(width);
    std::iota(cols.begin(), cols.end(), 0);
  }
  std::vector<double> col_scores(scores.size());
  std::vector<int> col_targets(scores.size());
  double total = 0;
  std::size_t evaluated = 0;
  for (std::size_t c : cols) {
    if (c >= width) throw Error("mean_ap: class index out of range");
    bool any = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col_scores[i] = scores[i][c];
      col_targets[i] = targets[i][c] != 0;
      any = any || col_targets[i];
    }
    if (!any) continue;
    total += average_precision(col_scores, col_targets);
    ++evaluated;
  }
  if (evaluated == 0) throw Error("mean_ap: no class has a positive example");
  return total / static_cast<double>(evaluated);
}

double iou_acc(std::span<const std::size_t> pred,
               std::span<const std::size_t> target,
               std::size_t fine_per_coarse) {
  check_congruent(pred.size(), target.size(), "iou_acc");
  if (fine_per_coarse == 0) throw Error("iou_acc: fine_per_coarse must be >= 1");
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    // Fine and coarse labels live in disjoint label spaces.
    const int inter = (pred[i] == target[i]) +
                      (pred[i] / fine_per_coarse == target[i] / fine_per_coarse);
    sum += static_cast<double>(inter) / static_cast<double>(4 - inter);
  }
  return 100.0 * sum / static_cast<double>(pred.size());
}

double mean_iou(std::span<const std::size_t> pred_map,
                std::span<const std::size_t> target_map, std::size_t classes) {
  check_congruent(pred_map.size(), target_map.size(), "mean_iou");
  std::vector<std::size_t> tp(classes), fp(classes), fn(classes);
  for (std::size_t i = 0; i < pred_map.size(); ++i) {
    const std::size_t p = pred_map[i];
    const std::size_t t = target_map[i];
    if (p >= classes || t >= classes) throw Error("mean_iou: class out of range");
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fn[c] == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c] + fn[c]);
    ++present;
  }
  return 100.0 * sum / static_cast<double>(present);
}

double MetricsReport::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw Error("metric '" + name + "' not in report");
  return it->second;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = values;
  j["count"] = count;
  return j;
}

}  // namespace plugnet
