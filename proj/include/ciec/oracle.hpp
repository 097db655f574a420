#pragma once

// Brute-force reference implementations used to cross-check the model-side
// operators. Nothing here depends on the autograd engine or the model code.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace ciec::oracle {

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
/// Throws std::domain_error when f is non-finite at any probe.
std::vector<double> finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h = 1e-5);

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

/// tau * log(mean(exp(x / tau))), evaluated in long double with the maximum
/// factored out.
double reference_lse(std::span<const double> x, double tau);

/// Mean of the k largest values by full sort.
double reference_topk_mean(std::span<const double> x, int k);

/// Box mask value at patch (col, row) of a grid_side x grid_side grid.
double reference_soft_mask_value(double cx, double cy, double w, double h, int col, int row,
                                 int grid_side, double tau1);

/// masks[i][j]: candidate i, patch j. Returns argmax_i of
/// sum_j masks[i][j] * (p[j] + alpha * sims[j]); lowest index wins ties.
int brute_force_best_box(std::span<const double> p, std::span<const double> sims,
                         const std::vector<std::vector<double>>& masks, double alpha);

/// Fraction of positive-negative pairs ranked correctly, ties counted half.
/// Requires both classes.
double pairwise_auc(std::span<const double> scores, std::span<const int> labels);

/// Pairwise AUC estimated from `draws` random positive-negative pairs.
double monte_carlo_auc(std::span<const double> scores, std::span<const int> labels, int draws,
                       std::uint64_t seed);

/// Two-pass (x - mean) / sqrt(max(var, floor)) over the masked entries with
/// population variance; masked-out entries map to 0.
std::vector<double> reference_zscore(std::span<const double> x, std::span<const char> mask,
                                     double floor = 1e-6);

}  // namespace ciec::oracle
