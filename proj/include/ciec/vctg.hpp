#pragma once

// Text-branch weakly-supervised localization: coarse Top-K prediction,
// intrinsic convolutional cue, extrinsic visual-deviation cue with in-sentence
// Z-score calibration, gated fusion, asymmetric sparse and semantic
// consistency constraints.

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ciec/autograd.hpp"
#include "ciec/nn.hpp"

namespace ciec::vctg {

using ag::Mat;
using ag::Tensor;

struct VctgHyper {
  double lambda = 2.0;    // weight of the authentic-sentence suppression term
  double delta2 = 0.1;    // semantic consistency margin
  int k_coarse = 2;       // Top-K for the coarse text prediction, capped at content length
  double k2_ratio = 0.15; // sparse activations per content token
  double z_floor = 1e-6;  // variance floor of the in-sentence Z-score

  void validate() const;
};

inline constexpr int kConvWindow = 3;

/// max(1, ceil(ratio * content_len)), capped at content_len.
int k2_policy(int content_len, double ratio = 0.15);

struct CoarseText {
  Tensor y_coarse;  // 1 x 1
  Tensor loss;      // undefined without a label
};

/// Top-K mean over content-token probabilities (L x 1). K is capped at the
/// content count; zero content tokens is a ValidationError.
CoarseText coarse_text(const Tensor& token_probs, std::span<const char> content_mask, int k,
                       std::optional<int> y_t);

/// (x - mean) / sqrt(max(var, floor)) over content positions (population
/// variance); zero elsewhere.
Tensor in_sentence_zscore(const Tensor& x, std::span<const char> content_mask, double floor = 1e-6);

/// content_mask * sigmoid(eta*beta - eta*Z(S_raw)).
Tensor extrinsic_scores(const Tensor& s_raw, std::span<const char> content_mask, const Tensor& eta,
                        const Tensor& beta, double floor = 1e-6);

/// clamp(w_it * S_it + w_et * S_et, 0, 1).
Tensor fuse_scores(const Tensor& s_it, const Tensor& s_et, const Tensor& w_it, const Tensor& w_et);

/// sum_l S_t[l] T_hat[l] / (sum_l S_t[l] + 1e-6): 1 x D.
Tensor weighted_sentence(const Tensor& s_t, const Tensor& t_tok_hat);

/// Top-K2 content positions by score (the set O), sorted ascending. Empty
/// when there are no content tokens.
std::vector<int> sparse_set(const Mat& s_t, std::span<const char> content_mask, double k2_ratio = 0.15);

struct SparseLoss {
  Tensor total;     // lambda * true_term + fake_term
  Tensor true_term;
  Tensor fake_term;
  std::vector<std::vector<int>> selected;  // per sentence: Top-K2 set O (fake sentences only)
  int skipped = 0;                         // fake sentences without content tokens
};

/// Authentic sentences: mean over content tokens of BCE(S_t, 0). Forged
/// sentences: mean over the K2 highest-scoring content tokens of BCE(S_t, 1).
/// Each term is averaged over its own sentence set; an empty set gives 0.
SparseLoss asymmetric_sparse_loss(std::span<const Tensor> s_t, std::span<const int> y_t,
                                  std::span<const std::vector<char>> content_masks, double lambda,
                                  double k2_ratio = 0.15);

/// ReLU(delta2 - (mu1 - mu2)) where mu1/mu2 average per-sentence mean S_raw
/// over valid tokens for authentic pairs and authentic-image/forged-text
/// pairs. Visual forgeries are excluded; 0 when either set is empty.
Tensor semantic_consistency_loss(std::span<const Tensor> s_raw, std::span<const int> y_v,
                                 std::span<const int> y_t,
                                 std::span<const std::vector<char>> padding_masks, double delta2);

/// Trainable part of the text branch.
class VctgHead {
 public:
  VctgHead() = default;
  VctgHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng);

  /// sigmoid(linear(T_hat_tok)): L x 1 token probabilities for the coarse path.
  Tensor token_probs(const Tensor& t_tok_hat) const;
  /// content_mask * sigmoid(linear(conv1d_3(T_hat_tok))); padding rows are
  /// zeroed before the convolution.
  Tensor intrinsic_scores(const Tensor& t_tok_hat, std::span<const char> padding_mask,
                          std::span<const char> content_mask) const;
  /// Per-token best cosine match over projected raw patches: L x 1.
  Tensor raw_similarity(const Tensor& t_tok, const Tensor& v_pat) const;
  /// sigmoid(linear(weighted_sentence(S_t, T_hat_tok))).
  Tensor fine_prob(const Tensor& s_t, const Tensor& t_tok_hat) const;

  Tensor eta, beta, w_it, w_et;

 private:
  nn::Linear token_head_;
  Tensor conv_weight_;  // (3 D) x D
  Tensor conv_bias_;
  nn::Linear intrinsic_head_;
  nn::Linear proj_t_, proj_v_;
  nn::Linear fine_head_;
};

}  // namespace ciec::vctg
