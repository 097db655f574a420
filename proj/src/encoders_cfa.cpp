#include "ciec/encoders_cfa.hpp"

#include <string>

#include "ciec/errors.hpp"

namespace ciec::model {

namespace {
constexpr double kEmbedInitStd = 0.5;
}

void CfaConfig::validate() const {
  if (layers < 0) throw ConfigError("cfa: layer count must be non-negative");
  if (embed_dim <= 0 || heads <= 0) throw ConfigError("cfa: embed_dim and heads must be positive");
  if (embed_dim % heads != 0) throw ConfigError("cfa: embed_dim must be divisible by heads");
  if (ffn_ratio <= 0) throw ConfigError("cfa: ffn_ratio must be positive");
}

Tensor with_cls(const Encoded& e) {
  const Tensor parts[] = {e.cls, e.seq};
  return ag::concat_rows(parts);
}

ImageEncoder::ImageEncoder(nn::ParamStore& store, int num_patches, int patch_dim,
                           const CfaConfig& cfg, std::mt19937_64& rng)
    : num_patches_(num_patches),
      patch_dim_(patch_dim),
      proj_(store, "image.proj", patch_dim, cfg.embed_dim, rng),
      pos_(store.add("image.pos", nn::normal_init(rng, num_patches, cfg.embed_dim, kEmbedInitStd))),
      cls_(store.add("image.cls", nn::normal_init(rng, 1, cfg.embed_dim, kEmbedInitStd))),
      block_(store, "image.block", cfg.embed_dim, cfg.heads, cfg.ffn_ratio, rng) {}

Encoded ImageEncoder::operator()(const Mat& patches) const {
  if (patches.rows() != num_patches_ || patches.cols() != patch_dim_) {
    throw ConfigError("image encoder: expected " + std::to_string(num_patches_) + "x" +
                      std::to_string(patch_dim_) + " patch grid, got " +
                      std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()));
  }
  Tensor x = proj_(ag::constant(patches)) + pos_;
  const Tensor parts[] = {cls_, x};
  Tensor h = block_(ag::concat_rows(parts));
  return {ag::slice_rows(h, 0, 1), ag::slice_rows(h, 1, num_patches_)};
}

TextEncoder::TextEncoder(nn::ParamStore& store, int token_length, int vocab_size,
                         const CfaConfig& cfg, std::mt19937_64& rng)
    : token_length_(token_length),
      vocab_size_(vocab_size),
      embedding_(store.add("text.embedding", nn::normal_init(rng, vocab_size, cfg.embed_dim, kEmbedInitStd))),
      pos_(store.add("text.pos", nn::normal_init(rng, token_length, cfg.embed_dim, kEmbedInitStd))),
      cls_(store.add("text.cls", nn::normal_init(rng, 1, cfg.embed_dim, kEmbedInitStd))),
      block_(store, "text.block", cfg.embed_dim, cfg.heads, cfg.ffn_ratio, rng) {}

Encoded TextEncoder::operator()(std::span<const int> tokens,
                                std::span<const char> padding_mask) const {
  if (static_cast<int>(tokens.size()) != token_length_ ||
      padding_mask.size() != tokens.size()) {
    throw ConfigError("text encoder: expected " + std::to_string(token_length_) + " tokens, got " +
                      std::to_string(tokens.size()));
  }
  std::vector<ag::Index> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab_size_) throw ConfigError("text encoder: token id out of range");
    ids[i] = tokens[i];
  }
  Tensor x = ag::gather_rows(embedding_, ids) + pos_;
  std::vector<char> valid(tokens.size() + 1, 1);
  for (std::size_t i = 0; i < tokens.size(); ++i) valid[i + 1] = padding_mask[i];
  const Tensor parts[] = {cls_, x};
  Tensor h = block_(ag::concat_rows(parts), valid);
  return {ag::slice_rows(h, 0, 1), ag::slice_rows(h, 1, token_length_)};
}

CoAttentionLayer::CoAttentionLayer(nn::ParamStore& store, const std::string& name,
                                   const CfaConfig& cfg, std::mt19937_64& rng) {
  auto build = [&](const std::string& prefix) {
    return Stream{
        nn::MultiHeadAttention(store, prefix + ".self", cfg.embed_dim, cfg.heads, rng),
        nn::MultiHeadAttention(store, prefix + ".cross", cfg.embed_dim, cfg.heads, rng),
        nn::LayerNorm(store, prefix + ".norm_self", cfg.embed_dim),
        nn::LayerNorm(store, prefix + ".norm_cross", cfg.embed_dim),
        nn::LayerNorm(store, prefix + ".norm_ffn", cfg.embed_dim),
        nn::FeedForward(store, prefix + ".ffn", cfg.embed_dim, cfg.ffn_ratio, rng),
    };
  };
  image_ = build(name + ".image");
  text_ = build(name + ".text");
}

std::pair<Tensor, Tensor> CoAttentionLayer::operator()(const Tensor& v, const Tensor& t,
                                                       std::span<const char> text_valid) const {
  Tensor vn = image_.norm_self(v), tn = text_.norm_self(t);
  Tensor v1 = v + image_.self_attn(vn, vn);
  Tensor t1 = t + text_.self_attn(tn, tn, text_valid);
  Tensor v1n = image_.norm_cross(v1), t1n = text_.norm_cross(t1);
  Tensor v2 = v1 + image_.cross_attn(v1n, t1n, text_valid);
  Tensor t2 = t1 + text_.cross_attn(t1n, v1n);
  return {v2 + image_.ffn(image_.norm_ffn(v2)), t2 + text_.ffn(text_.norm_ffn(t2))};
}

CrossModalAlignment::CrossModalAlignment(nn::ParamStore& store, const CfaConfig& cfg,
                                         std::mt19937_64& rng) {
  cfg.validate();
  layers_.reserve(static_cast<std::size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    layers_.emplace_back(store, "cfa." + std::to_string(i), cfg, rng);
  }
}

std::pair<Tensor, Tensor> CrossModalAlignment::operator()(const Tensor& v, const Tensor& t,
                                                          std::span<const char> text_valid) const {
  if (v.cols() != t.cols()) throw ConfigError("cfa: image and text embed dims differ");
  if (static_cast<ag::Index>(text_valid.size()) != t.rows()) {
    throw ConfigError("cfa: text mask length mismatch");
  }
  Tensor vi = v, ti = t;
  for (const auto& layer : layers_) std::tie(vi, ti) = layer(vi, ti, text_valid);
  return {vi, ti};
}

BicHead::BicHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng)
    : fc1_(store, "bic.fc1", 2 * embed_dim, 4 * embed_dim, rng),
      fc2_(store, "bic.fc2", 4 * embed_dim, 1, rng),
      norm_(store, "bic.norm", 4 * embed_dim) {}

Tensor BicHead::operator()(const Tensor& v_cls, const Tensor& t_cls) const {
  const Tensor parts[] = {v_cls, t_cls};
  Tensor h = ag::gelu(norm_(fc1_(ag::concat_cols(parts))));
  return ag::sigmoid(fc2_(h));
}

Tensor bic_loss(std::span<const Tensor> probs, std::span<const int> labels) {
  if (probs.size() != labels.size() || probs.empty()) {
    throw ValidationError("bic_loss: probabilities and labels must be non-empty and aligned");
  }
  Tensor total;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("bic_loss: label must be 0 or 1");
    Tensor l = ag::binary_cross_entropy(probs[i], labels[i]);
    total = total.defined() ? total + l : l;
  }
  return total * (1.0 / static_cast<double>(probs.size()));
}

}  // namespace ciec::model
