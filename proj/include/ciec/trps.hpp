#pragma once

// Image-branch weakly-supervised localization: coarse Top-K prediction, soft
// box masks, implicit/explicit candidate scoring, scope-gated LSE
// aggregation, background silencing and spatial contrast enhancement.

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ciec/autograd.hpp"
#include "ciec/box.hpp"
#include "ciec/nn.hpp"

namespace ciec::trps {

using ag::Mat;
using ag::Tensor;

struct TrpsHyper {
  double tau1 = 2.0;    // soft-mask boundary sharpness
  double tau2 = 0.1;    // LSE temperature
  double eps = 0.1;     // background threshold on the best-box mask
  double delta1 = 0.2;  // spatial contrast margin
  int k_coarse = 4;     // Top-K for the coarse image prediction
  int k1 = 5;           // hard negatives per fake patch

  /// ceil(5% of the patch count), at least 1.
  static int default_k_coarse(int num_patches);
  void validate(int num_patches) const;
};

/// Mean of the k largest entries (ties broken by lowest index).
Tensor topk_mean(const Tensor& scores, int k);
/// Flat indices of the k largest entries, lowest index first among ties.
std::vector<ag::Index> topk_indices(const Mat& values, int k);

/// tau * log((1/n) sum exp(x_i / tau)) with max subtraction.
Tensor lse_pool(const Tensor& x, double tau);

struct CoarseImage {
  Tensor y_coarse;  // 1 x 1
  Tensor loss;      // 1 x 1, undefined when no label given
};

/// Top-K mean of patch probabilities (N x 1) and its BCE against y_v.
CoarseImage coarse_image(const Tensor& patch_probs, int k, std::optional<int> y_v);

/// n x 4 tensor of (cx, cy, w, h) rows.
Tensor boxes_tensor(std::span<const Box> boxes);

/// n x N soft membership with patch centers at (index + 0.5) in grid units:
/// sigma(tau1 (G w/2 - |p_x - G c_x|)) * sigma(tau1 (G h/2 - |p_y - G c_y|)).
Tensor soft_mask(const Tensor& boxes, int grid_side, double tau1);
Tensor soft_mask(std::span<const Box> boxes, int grid_side, double tau1);

struct CandidateScores {
  Tensor s_iv;   // n x 1
  Tensor s_ev;   // n x 1
  Tensor s_v;    // n x 1
  int best_idx = 0;
  Tensor m_star;  // 1 x N, row of the filtered mask at best_idx
};

/// S_iv = M_hat P_p, S_ev = M_hat sim, S_v = S_iv + alpha S_ev; best is
/// argmax S_v with lowest-index tie-break. p_patch and sim are N x 1.
CandidateScores dual_branch_scores(const Tensor& p_patch, const Tensor& sim,
                                   const Tensor& mask_hat, const Tensor& alpha);

struct ScopeGated {
  Tensor a_local;   // 1 x 1
  Tensor a_global;  // 1 x 1
  Tensor y_fine;    // selected branch clamped to [1e-6, 1 - 1e-6]
};

/// Local LSE over candidate scores when `valid`, global LSE over patch
/// probabilities otherwise. The unselected branch gets no gradient.
ScopeGated scope_gated_aggregate(const Tensor& s_v, const Tensor& p_patch, bool valid,
                                 double tau2);

/// 1 where the best-box mask is below eps.
std::vector<char> background_indicator(const Mat& m_star, double eps);

/// Mean zero-target BCE over background patches; 0 when there are none.
Tensor background_silencing_loss(const Tensor& p_patch, std::span<const char> background);

/// Spatial weight exp(-d^2 / (2 sigma^2)) between patch centers; N x N.
Mat spatial_kernel(int grid_side, double sigma);

/// Cosine similarity of feature rows modulated by the spatial kernel.
Tensor spatial_similarity(const Tensor& features, const Mat& kernel);

/// Margin ranking loss over fake-fake pairs and the k1 most similar
/// fake-true pairs. Returns nullopt when fewer than 2 fake or no true patches.
std::optional<Tensor> spatial_contrast_loss(const Tensor& features, std::span<const char> background,
                                            const Mat& kernel, int k1, double delta1);

/// Trainable part of the image branch.
class TrpsHead {
 public:
  TrpsHead() = default;
  TrpsHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng);

  /// sigmoid(linear(V_hat_pat)): N x 1 patch forgery probabilities.
  Tensor patch_probs(const Tensor& v_pat_hat) const;
  /// Cosine similarity between projected raw patches and raw text CLS: N x 1.
  Tensor explicit_similarity(const Tensor& v_pat, const Tensor& t_cls) const;

  Tensor alpha;

 private:
  nn::Linear patch_head_;
  nn::Linear proj_v_, proj_t_;
};

}  // namespace ciec::trps
