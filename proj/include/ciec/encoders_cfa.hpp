#pragma once

// Toy unimodal encoders, the dual-stream co-attention alignment stack, and the
// multimodal binary classification head.

#include <random>
#include <span>
#include <vector>

#include "ciec/autograd.hpp"
#include "ciec/nn.hpp"

namespace ciec::model {

using ag::Mat;
using ag::Tensor;

struct CfaConfig {
  int layers = 2;      // stacked co-attention layers (6 at full scale)
  int embed_dim = 32;
  int heads = 4;
  int ffn_ratio = 2;

  /// layers may be 0 (identity alignment); embed_dim must divide by heads.
  void validate() const;
};

/// Raw encoder outputs and their aligned counterparts. Rows are tokens.
struct FeatureBundle {
  Tensor v_cls;      // 1 x D
  Tensor v_pat;      // N x D
  Tensor t_cls;      // 1 x D
  Tensor t_tok;      // L x D
  Tensor v_cls_hat;
  Tensor v_pat_hat;
  Tensor t_cls_hat;
  Tensor t_tok_hat;
};

struct Encoded {
  Tensor cls;  // 1 x D
  Tensor seq;  // rows x D
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(nn::ParamStore& store, int num_patches, int patch_dim, const CfaConfig& cfg,
               std::mt19937_64& rng);

  /// patches: num_patches x patch_dim. Linear projection + learned position
  /// encoding + one self-attention block over [cls; patches].
  Encoded operator()(const Mat& patches) const;

 private:
  int num_patches_ = 0;
  int patch_dim_ = 0;
  nn::Linear proj_;
  Tensor pos_;
  Tensor cls_;
  nn::TransformerBlock block_;
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParamStore& store, int token_length, int vocab_size, const CfaConfig& cfg,
              std::mt19937_64& rng);

  /// Padding positions (padding_mask == 0) are excluded as attention keys.
  Encoded operator()(std::span<const int> tokens, std::span<const char> padding_mask) const;

 private:
  int token_length_ = 0;
  int vocab_size_ = 0;
  Tensor embedding_;
  Tensor pos_;
  Tensor cls_;
  nn::TransformerBlock block_;
};

class CoAttentionLayer {
 public:
  CoAttentionLayer(nn::ParamStore& store, const std::string& name, const CfaConfig& cfg,
                   std::mt19937_64& rng);

  /// Both streams: self-attention, then cross-attention to the other
  /// stream's self-attended states, then a feed-forward block; each sub-layer
  /// is pre-norm residual: x += f(LN(x)).
  std::pair<Tensor, Tensor> operator()(const Tensor& v, const Tensor& t,
                                       std::span<const char> text_valid) const;

 private:
  struct Stream {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm norm_self, norm_cross, norm_ffn;
    nn::FeedForward ffn;
  };
  Stream image_, text_;
};

class CrossModalAlignment {
 public:
  CrossModalAlignment() = default;
  CrossModalAlignment(nn::ParamStore& store, const CfaConfig& cfg, std::mt19937_64& rng);

  /// v: (N+1) x D with the CLS row first; t: (L+1) x D likewise.
  /// text_valid covers the L+1 text rows.
  std::pair<Tensor, Tensor> operator()(const Tensor& v, const Tensor& t,
                                       std::span<const char> text_valid) const;

  int depth() const { return static_cast<int>(layers_.size()); }

 private:
  std::vector<CoAttentionLayer> layers_;
};

/// MLP(concat(V_cls, T_cls)) -> probability; hidden width 2x input with
/// layer norm and GELU.
class BicHead {
 public:
  BicHead() = default;
  BicHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng);
  Tensor operator()(const Tensor& v_cls, const Tensor& t_cls) const;  // 1 x 1

 private:
  nn::Linear fc1_, fc2_;
  nn::LayerNorm norm_;
};

/// Mean binary cross-entropy over the batch; labels must be 0 or 1.
Tensor bic_loss(std::span<const Tensor> probs, std::span<const int> labels);

/// Concatenates cls and sequence rows into one stream.
Tensor with_cls(const Encoded& e);

}  // namespace ciec::model
