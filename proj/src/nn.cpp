#include "ciec/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "ciec/errors.hpp"

namespace ciec::nn {

Tensor ParamStore::add(const std::string& name, Mat init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor t(std::move(init), true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.second.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

std::vector<Mat> ParamStore::snapshot() const {
  std::vector<Mat> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second.value());
  return out;
}

void ParamStore::restore(const std::vector<Mat>& values) {
  if (values.size() != entries_.size()) throw ConfigError("snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor t = entries_[i].second;
    if (t.rows() != values[i].rows() || t.cols() != values[i].cols()) {
      throw ConfigError("snapshot shape mismatch for " + entries_[i].first);
    }
    t.mutable_value() = values[i];
  }
}

Mat xavier_uniform(std::mt19937_64& rng, int fan_in, int fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(fan_in, fan_out);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat normal_init(std::mt19937_64& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out,
               std::mt19937_64& rng)
    : weight(store.add(name + ".weight", xavier_uniform(rng, in, out))),
      bias(store.add(name + ".bias", Mat::Zero(1, out))) {}

Tensor Linear::operator()(const Tensor& x) const { return ag::matmul(x, weight) + bias; }

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int dim)
    : gain(store.add(name + ".gain", Mat::Ones(1, dim))),
      bias(store.add(name + ".bias", Mat::Zero(1, dim))) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ag::layer_norm_rows(x, gain, bias); }

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, int dim,
                                       int heads, std::mt19937_64& rng)
    : heads_(heads),
      q_(store, name + ".q", dim, dim, rng),
      k_(store, name + ".k", dim, dim, rng),
      v_(store, name + ".v", dim, dim, rng),
      out_(store, name + ".out", dim, dim, rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("embedding dim must be divisible by head count");
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& context,
                                      std::span<const char> key_valid) const {
  Tensor q = q_(query);
  Tensor k = k_(context);
  Tensor v = v_(context);
  const ag::Index dim = q.cols();
  const ag::Index head_dim = dim / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Tensor qh = ag::slice_cols(q, h * head_dim, head_dim);
    Tensor kh = ag::slice_cols(k, h * head_dim, head_dim);
    Tensor vh = ag::slice_cols(v, h * head_dim, head_dim);
    Tensor scores = ag::matmul(qh, ag::transpose(kh)) * scale;
    heads.push_back(ag::matmul(ag::softmax_rows(scores, key_valid), vh));
  }
  return out_(heads_ == 1 ? heads.front() : ag::concat_cols(heads));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, int dim, int ratio,
                         std::mt19937_64& rng)
    : up_(store, name + ".up", dim, dim * ratio, rng),
      down_(store, name + ".down", dim * ratio, dim, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const { return down_(ag::gelu(up_(x))); }

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, int dim,
                                   int heads, int ratio, std::mt19937_64& rng)
    : attn_(store, name + ".attn", dim, heads, rng),
      norm1_(store, name + ".norm1", dim),
      norm2_(store, name + ".norm2", dim),
      ffn_(store, name + ".ffn", dim, ratio, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, std::span<const char> key_valid) const {
  Tensor n = norm1_(x);
  Tensor h = x + attn_(n, n, key_valid);
  return h + ffn_(norm2_(h));
}

}  // namespace ciec::nn
