#pragma once

// Parameter storage and the small set of layers the encoders and heads are
// built from.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ciec/autograd.hpp"

namespace ciec::nn {

using ag::Mat;
using ag::Tensor;

/// Ordered registry of named trainable tensors.
class ParamStore {
 public:
  Tensor add(const std::string& name, Mat init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::span<const std::pair<std::string, Tensor>> entries() const { return entries_; }
  std::size_t count() const;  // total scalar parameters
  void zero_grad();

  std::vector<Mat> snapshot() const;
  void restore(const std::vector<Mat>& values);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

Mat xavier_uniform(std::mt19937_64& rng, int fan_in, int fan_out);
Mat normal_init(std::mt19937_64& rng, int rows, int cols, double stddev);

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const;

  Tensor gain;
  Tensor bias;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, int dim, int heads,
                     std::mt19937_64& rng);

  /// Rows of `query` attend to rows of `context`; context rows with
  /// key_valid==0 are excluded from attention.
  Tensor operator()(const Tensor& query, const Tensor& context,
                    std::span<const char> key_valid = {}) const;

 private:
  int heads_ = 1;
  Linear q_, k_, v_, out_;
};

/// Linear -> GELU -> Linear with hidden width ratio * dim.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, int dim, int ratio,
              std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;

 private:
  Linear up_, down_;
};

/// Pre-norm self-attention block: x += MHA(LN(x)); x += FFN(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, int dim, int heads, int ratio,
                   std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, std::span<const char> key_valid = {}) const;

 private:
  MultiHeadAttention attn_;
  LayerNorm norm1_, norm2_;
  FeedForward ffn_;
};

}  // namespace ciec::nn
