#include "ciec/vctg.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ciec/errors.hpp"
#include "ciec/trps.hpp"

namespace ciec::vctg {

namespace {

Tensor mask_column(std::span<const char> mask) {
  Mat m(static_cast<ag::Index>(mask.size()), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) m(static_cast<ag::Index>(i), 0) = mask[i] ? 1.0 : 0.0;
  return ag::constant(std::move(m));
}

std::vector<ag::Index> positions(std::span<const char> mask) {
  std::vector<ag::Index> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(static_cast<ag::Index>(i));
  }
  return out;
}

Tensor mean_of(std::vector<Tensor>& terms) {
  if (terms.empty()) return ag::scalar(0.0);
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return total * (1.0 / static_cast<double>(terms.size()));
}

}  // namespace

void VctgHyper::validate() const {
  if (!(lambda > 0 && delta2 > 0 && k2_ratio > 0 && z_floor > 0)) {
    throw ConfigError("vctg: lambda, delta2, k2_ratio and z_floor must be positive");
  }
  if (k_coarse < 1) throw ConfigError("vctg: k_coarse must be >= 1");
}

int k2_policy(int content_len, double ratio) {
  if (content_len <= 0) return 0;
  const int k = std::max(1, static_cast<int>(std::ceil(ratio * content_len)));
  return std::min(k, content_len);
}

CoarseText coarse_text(const Tensor& token_probs, std::span<const char> content_mask, int k,
                       std::optional<int> y_t) {
  if (k < 1) throw ConfigError("coarse_text: K must be >= 1");
  if (static_cast<ag::Index>(content_mask.size()) != token_probs.size()) {
    throw ValidationError("coarse_text: mask length mismatch");
  }
  auto pos = positions(content_mask);
  if (pos.empty()) throw ValidationError("coarse_text: sentence has no content tokens");
  Tensor content = ag::gather(token_probs, pos);
  CoarseText out;
  out.y_coarse = trps::topk_mean(content, std::min<int>(k, static_cast<int>(pos.size())));
  if (y_t) {
    if (*y_t != 0 && *y_t != 1) throw ValidationError("coarse_text: y_t must be 0 or 1");
    out.loss = ag::binary_cross_entropy(out.y_coarse, *y_t);
  }
  return out;
}

Tensor in_sentence_zscore(const Tensor& x, std::span<const char> content_mask, double floor) {
  if (static_cast<ag::Index>(content_mask.size()) != x.size()) {
    throw ValidationError("in_sentence_zscore: mask length mismatch");
  }
  const auto count = static_cast<double>(std::count_if(content_mask.begin(), content_mask.end(),
                                                       [](char c) { return c != 0; }));
  if (count == 0) return x * 0.0;
  Tensor m = mask_column(content_mask);
  Tensor mu = ag::sum(x * m) * (1.0 / count);
  Tensor centered = (x - mu) * m;
  Tensor var = ag::sum(ag::square(centered)) * (1.0 / count);
  Tensor denom = ag::sqrt(var.value()(0, 0) > floor ? var : ag::scalar(floor));
  return centered / denom;
}

Tensor extrinsic_scores(const Tensor& s_raw, std::span<const char> content_mask, const Tensor& eta,
                        const Tensor& beta, double floor) {
  Tensor z = in_sentence_zscore(s_raw, content_mask, floor);
  return ag::sigmoid(eta * beta - eta * z) * mask_column(content_mask);
}

Tensor fuse_scores(const Tensor& s_it, const Tensor& s_et, const Tensor& w_it, const Tensor& w_et) {
  return ag::clamp(s_it * w_it + s_et * w_et, 0.0, 1.0);
}

Tensor weighted_sentence(const Tensor& s_t, const Tensor& t_tok_hat) {
  Tensor num = ag::matmul(ag::transpose(s_t), t_tok_hat);
  return num / (ag::sum(s_t) + 1e-6);
}

std::vector<int> sparse_set(const Mat& s_t, std::span<const char> content_mask, double k2_ratio) {
  if (static_cast<ag::Index>(content_mask.size()) != s_t.size()) {
    throw ValidationError("sparse_set: mask length mismatch");
  }
  auto pos = positions(content_mask);
  std::vector<int> out;
  if (pos.empty()) return out;
  Mat content(1, static_cast<ag::Index>(pos.size()));
  for (std::size_t i = 0; i < pos.size(); ++i) content(0, static_cast<ag::Index>(i)) = s_t.data()[pos[i]];
  const int k = k2_policy(static_cast<int>(pos.size()), k2_ratio);
  for (ag::Index i : trps::topk_indices(content, k)) out.push_back(static_cast<int>(pos[static_cast<std::size_t>(i)]));
  std::sort(out.begin(), out.end());
  return out;
}

SparseLoss asymmetric_sparse_loss(std::span<const Tensor> s_t, std::span<const int> y_t,
                                  std::span<const std::vector<char>> content_masks, double lambda,
                                  double k2_ratio) {
  if (s_t.size() != y_t.size() || s_t.size() != content_masks.size()) {
    throw ValidationError("asymmetric_sparse_loss: batch fields misaligned");
  }
  SparseLoss out;
  out.selected.resize(s_t.size());
  std::vector<Tensor> true_terms, fake_terms;
  for (std::size_t b = 0; b < s_t.size(); ++b) {
    auto pos = positions(content_masks[b]);
    if (pos.empty()) {
      if (y_t[b] == 1) {
        spdlog::warn("asymmetric_sparse_loss: forged sentence {} has no content tokens, skipped", b);
        ++out.skipped;
      }
      continue;
    }
    Tensor content = ag::gather(s_t[b], pos);
    if (y_t[b] == 0) {
      true_terms.push_back(ag::mean(ag::binary_cross_entropy(content, 0.0)));
    } else {
      out.selected[b] = sparse_set(s_t[b].value(), content_masks[b], k2_ratio);
      std::vector<ag::Index> top(out.selected[b].begin(), out.selected[b].end());
      fake_terms.push_back(ag::mean(ag::binary_cross_entropy(ag::gather(s_t[b], top), 1.0)));
    }
  }
  out.true_term = mean_of(true_terms);
  out.fake_term = mean_of(fake_terms);
  out.total = out.true_term * lambda + out.fake_term;
  return out;
}

Tensor semantic_consistency_loss(std::span<const Tensor> s_raw, std::span<const int> y_v,
                                 std::span<const int> y_t,
                                 std::span<const std::vector<char>> padding_masks, double delta2) {
  if (s_raw.size() != y_v.size() || s_raw.size() != y_t.size() || s_raw.size() != padding_masks.size()) {
    throw ValidationError("semantic_consistency_loss: batch fields misaligned");
  }
  std::vector<Tensor> authentic, text_forged;
  for (std::size_t b = 0; b < s_raw.size(); ++b) {
    if (y_v[b] != 0) continue;
    auto pos = positions(padding_masks[b]);
    if (pos.empty()) continue;
    Tensor m = ag::mean(ag::gather(s_raw[b], pos));
    (y_t[b] == 0 ? authentic : text_forged).push_back(m);
  }
  if (authentic.empty() || text_forged.empty()) return ag::scalar(0.0);
  Tensor gap = mean_of(authentic) - mean_of(text_forged);
  return ag::relu(delta2 - gap);
}

VctgHead::VctgHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng)
    : eta(store.add("vctg.eta", Mat::Constant(1, 1, 1.0))),
      beta(store.add("vctg.beta", Mat::Constant(1, 1, 0.0))),
      w_it(store.add("vctg.w_it", Mat::Constant(1, 1, 0.5))),
      w_et(store.add("vctg.w_et", Mat::Constant(1, 1, 0.5))),
      token_head_(store, "vctg.token_head", embed_dim, 1, rng),
      conv_weight_(store.add("vctg.conv.weight", nn::xavier_uniform(rng, kConvWindow * embed_dim, embed_dim))),
      conv_bias_(store.add("vctg.conv.bias", Mat::Zero(1, embed_dim))),
      intrinsic_head_(store, "vctg.intrinsic_head", embed_dim, 1, rng),
      proj_t_(store, "vctg.proj_t", embed_dim, embed_dim, rng),
      proj_v_(store, "vctg.proj_v", embed_dim, embed_dim, rng),
      fine_head_(store, "vctg.fine_head", embed_dim, 1, rng) {}

Tensor VctgHead::token_probs(const Tensor& t_tok_hat) const {
  return ag::sigmoid(token_head_(t_tok_hat));
}

Tensor VctgHead::intrinsic_scores(const Tensor& t_tok_hat, std::span<const char> padding_mask,
                                  std::span<const char> content_mask) const {
  if (static_cast<ag::Index>(padding_mask.size()) != t_tok_hat.rows() ||
      content_mask.size() != padding_mask.size()) {
    throw ValidationError("intrinsic_scores: mask length mismatch");
  }
  Tensor x = t_tok_hat * mask_column(padding_mask);
  // Window of 3 with zero padding: row l sees rows l-1, l, l+1.
  const Tensor taps[] = {ag::shift_rows(x, 1), x, ag::shift_rows(x, -1)};
  Tensor conv = ag::matmul(ag::concat_cols(taps), conv_weight_) + conv_bias_;
  return ag::sigmoid(intrinsic_head_(conv)) * mask_column(content_mask);
}

Tensor VctgHead::raw_similarity(const Tensor& t_tok, const Tensor& v_pat) const {
  Tensor pt = ag::l2_normalize_rows(proj_t_(t_tok));
  Tensor pv = ag::l2_normalize_rows(proj_v_(v_pat));
  return ag::row_max(ag::matmul(pt, ag::transpose(pv)));
}

Tensor VctgHead::fine_prob(const Tensor& s_t, const Tensor& t_tok_hat) const {
  return ag::sigmoid(fine_head_(weighted_sentence(s_t, t_tok_hat)));
}

}  // namespace ciec::vctg
