#include "ciec/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace ciec::metrics {

double grounding_iou(const std::optional<Box>& pred, const std::optional<Box>& gt) {
  if (!pred && !gt) return 1.0;
  if (!pred || !gt) return 0.0;
  return iou(*pred, *gt);
}

GroundingScores grounding_suite(std::span<const std::optional<Box>> pred,
                                std::span<const std::optional<Box>> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("grounding_suite: size mismatch");
  GroundingScores s;
  s.count = static_cast<int>(pred.size());
  if (pred.empty()) return s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double v = grounding_iou(pred[i], gt[i]);
    s.iou_m += v;
    s.iou50 += v >= 0.5;
    s.iou75 += v >= 0.75;
  }
  const double n = static_cast<double>(pred.size());
  s.iou_m /= n;
  s.iou50 /= n;
  s.iou75 /= n;
  return s;
}

PrfScores token_prf(std::span<const std::vector<int>> pred, std::span<const std::vector<int>> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("token_prf: size mismatch");
  PrfScores s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::set<int> p(pred[i].begin(), pred[i].end());
    std::set<int> g(gt[i].begin(), gt[i].end());
    for (int t : p) (g.count(t) ? s.tp : s.fp) += 1;
    for (int t : g) s.fn += !p.count(t);
  }
  s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups (1-based).
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

std::optional<double> equal_error_rate(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("equal_error_rate: size mismatch");
  double pos = 0, neg = 0;
  for (int y : labels) (y ? pos : neg) += 1;
  if (pos == 0 || neg == 0) return std::nullopt;

  // Sweep thresholds from +inf downward; predict positive when score >= t.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0;
  double prev_far = 0.0, prev_frr = 1.0;  // threshold above every score
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1;
      ++j;
    }
    const double far = fp / neg;
    const double frr = 1.0 - tp / pos;
    if (far >= frr) {
      // The difference far - frr changes sign between the previous and
      // current ROC points.
      const double d0 = prev_far - prev_frr;
      const double d1 = far - frr;
      const double t = d1 == d0 ? 0.0 : -d0 / (d1 - d0);
      return prev_far + t * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
    i = j;
  }
  return prev_far;
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (scores.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] > threshold) == (labels[i] != 0);
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

BinaryScores binary_suite(std::span<const double> scores, std::span<const int> labels) {
  return {roc_auc(scores, labels), equal_error_rate(scores, labels), accuracy(scores, labels)};
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["AUC"] = opt(r.binary.auc);
  j["EER"] = opt(r.binary.eer);
  j["EER_percent"] = r.binary.eer ? nlohmann::ordered_json(*r.binary.eer * 100.0) : nlohmann::ordered_json(nullptr);
  j["ACC"] = r.binary.acc;
  j["IoU_m"] = r.grounding_all.iou_m;
  j["IoU50"] = r.grounding_all.iou50;
  j["IoU75"] = r.grounding_all.iou75;
  j["Precision"] = r.text.precision;
  j["Recall"] = r.text.recall;
  j["F1"] = r.text.f1;
  j["iou_m_all"] = r.grounding_all.iou_m;
  j["iou_m_fake"] = r.grounding_fake.iou_m;
  j["iou50_fake"] = r.grounding_fake.iou50;
  j["iou75_fake"] = r.grounding_fake.iou75;
  j["num_samples"] = r.num_samples;
  j["num_fake_images"] = r.num_fake_images;
  j["num_fake_texts"] = r.num_fake_texts;
  return j;
}

}  // namespace ciec::metrics
