#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace plugnet {

// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const float> values);
std::size_t argmax(std::span<const double> values);

// Percent of positions where pred == target.
double mc_accuracy(std::span<const std::size_t> pred,
                   std::span<const std::size_t> target);

// Non-interpolated AP in percent: (1/P) * sum of precision@k over positive
// ranks. Scores are ranked descending, equal scores by ascending index.
// Throws if there is no positive.
double average_precision(std::span<const double> scores,
                         std::span<const int> targets);

// Rows are examples, columns classes. Classes without a positive are skipped;
// `classes` restricts evaluation to the listed columns (all when empty).
double mean_ap(const std::vector<std::vector<double>>& scores,
               const std::vector<std::vector<int>>& targets,
               const std::vector<std::size_t>& classes = {});

// Mean over examples of |P & G| / |P | G| with P = {pred, coarse(pred)} and
// G = {target, coarse(target)}, coarse(c) = c / fine_per_coarse. Percent.
double iou_acc(std::span<const std::size_t> pred,
               std::span<const std::size_t> target,
               std::size_t fine_per_coarse);

// Mean over classes present in the target of TP / (TP + FP + FN), computed
// from the confusion matrix over every position. Percent.
double mean_iou(std::span<const std::size_t> pred_map,
                std::span<const std::size_t> target_map, std::size_t classes);

struct MetricsReport {
  std::map<std::string, double> values;
  std::size_t count = 0;

  double at(const std::string& name) const;
  nlohmann::json to_json() const;
};

}  // namespace plugnet
