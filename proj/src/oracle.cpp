#include "ciec/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace ciec::oracle {

std::vector<double> finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double reference_lse(std::span<const double> x, double tau) {
  if (x.empty() || !(tau > 0)) throw std::invalid_argument("reference_lse: empty input or tau <= 0");
  long double m = x[0];
  for (double v : x) m = std::max<long double>(m, v);
  long double acc = 0;
  for (double v : x) acc += std::exp((static_cast<long double>(v) - m) / tau);
  return static_cast<double>(m + tau * std::log(acc / static_cast<long double>(x.size())));
}

double reference_topk_mean(std::span<const double> x, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > x.size()) throw std::invalid_argument("reference_topk_mean: bad k");
  std::vector<double> v(x.begin(), x.end());
  std::sort(v.begin(), v.end(), std::greater<>());
  long double acc = 0;
  for (int i = 0; i < k; ++i) acc += v[static_cast<std::size_t>(i)];
  return static_cast<double>(acc / k);
}

double reference_soft_mask_value(double cx, double cy, double w, double h, int col, int row,
                                 int grid_side, double tau1) {
  const double g = grid_side;
  const double px = col + 0.5;
  const double py = row + 0.5;
  const double mx = g * w / 2.0 - std::abs(px - g * cx);
  const double my = g * h / 2.0 - std::abs(py - g * cy);
  return 1.0 / (1.0 + std::exp(-tau1 * mx)) * (1.0 / (1.0 + std::exp(-tau1 * my)));
}

int brute_force_best_box(std::span<const double> p, std::span<const double> sims,
                         const std::vector<std::vector<double>>& masks, double alpha) {
  if (p.size() != sims.size()) throw std::invalid_argument("brute_force_best_box: size mismatch");
  int best = 0;
  long double best_score = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].size() != p.size()) throw std::invalid_argument("brute_force_best_box: mask width");
    long double implicit = 0, explicit_ = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      implicit += static_cast<long double>(masks[i][j]) * p[j];
      explicit_ += static_cast<long double>(masks[i][j]) * sims[j];
    }
    const long double score = implicit + alpha * explicit_;
    if (i == 0 || score > best_score) {
      best = static_cast<int>(i);
      best_score = score;
    }
  }
  return best;
}

double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("pairwise_auc: size mismatch");
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (pairs == 0) throw std::invalid_argument("pairwise_auc: needs both classes");
  return wins / pairs;
}

double monte_carlo_auc(std::span<const double> scores, std::span<const int> labels, int draws,
                       std::uint64_t seed) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty() || draws < 1) throw std::invalid_argument("monte_carlo_auc: bad input");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1), pick_neg(0, neg.size() - 1);
  double wins = 0;
  for (int d = 0; d < draws; ++d) {
    const double a = pos[pick_pos(rng)];
    const double b = neg[pick_neg(rng)];
    wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
  }
  return wins / draws;
}

std::vector<double> reference_zscore(std::span<const double> x, std::span<const char> mask, double floor) {
  if (x.size() != mask.size()) throw std::invalid_argument("reference_zscore: size mismatch");
  long double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) {
      sum += x[i];
      ++n;
    }
  }
  std::vector<double> out(x.size(), 0.0);
  if (n == 0) return out;
  const long double mean = sum / n;
  long double ss = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) ss += (x[i] - mean) * (x[i] - mean);
  }
  const long double sd = std::sqrt(std::max<long double>(ss / n, floor));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) out[i] = static_cast<double>((x[i] - mean) / sd);
  }
  return out;
}

}  // namespace ciec::oracle
