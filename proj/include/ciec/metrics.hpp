#pragma once

// Binary classification, image grounding and text grounding scores.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciec/box.hpp"

namespace ciec::metrics {

using ciec::iou;

struct GroundingScores {
  double iou_m = 0.0;
  double iou50 = 0.0;
  double iou75 = 0.0;
  int count = 0;
};

/// Per-sample IoU: both absent -> 1, exactly one absent -> 0.
double grounding_iou(const std::optional<Box>& pred, const std::optional<Box>& gt);

GroundingScores grounding_suite(std::span<const std::optional<Box>> pred,
                                std::span<const std::optional<Box>> gt);

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long tp = 0, fp = 0, fn = 0;
};

/// Micro-averaged over all samples; zero denominators give 0.
PrfScores token_prf(std::span<const std::vector<int>> pred, std::span<const std::vector<int>> gt);

struct BinaryScores {
  std::optional<double> auc;  // absent for single-class input
  std::optional<double> eer;
  double acc = 0.0;
};

/// AUC by rank statistic with ties counted half.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);
/// Crossing of false-accept and false-reject rates, linearly interpolated
/// between ROC points.
std::optional<double> equal_error_rate(std::span<const double> scores, std::span<const int> labels);
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);
BinaryScores binary_suite(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  BinaryScores binary;
  GroundingScores grounding_all;
  GroundingScores grounding_fake;
  PrfScores text;
  int num_samples = 0;
  int num_fake_images = 0;
  int num_fake_texts = 0;
};

nlohmann::ordered_json to_json(const MetricsReport& r);

}  // namespace ciec::metrics
