#include "ciec/trps.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ciec/errors.hpp"

namespace ciec::trps {

int TrpsHyper::default_k_coarse(int num_patches) {
  return std::max(1, static_cast<int>(std::ceil(0.05 * num_patches)));
}

void TrpsHyper::validate(int num_patches) const {
  if (!(tau1 > 0 && tau2 > 0 && delta1 > 0)) throw ConfigError("trps: temperatures and margin must be positive");
  if (!(eps > 0 && eps < 1)) throw ConfigError("trps: eps must lie in (0,1)");
  if (k_coarse < 1 || k_coarse > num_patches) throw ConfigError("trps: k_coarse must be in [1, N]");
  if (k1 < 1 || k1 > num_patches) throw ConfigError("trps: k1 must be in [1, N]");
}

std::vector<ag::Index> topk_indices(const Mat& values, int k) {
  const ag::Index n = values.size();
  if (k < 1 || k > n) throw ConfigError("top-k: k must be in [1, " + std::to_string(n) + "]");
  std::vector<ag::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const double* v = values.data();
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [v](ag::Index a, ag::Index b) {
    return v[a] > v[b] || (v[a] == v[b] && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

Tensor topk_mean(const Tensor& scores, int k) {
  return ag::mean(ag::gather(scores, topk_indices(scores.value(), k)));
}

Tensor lse_pool(const Tensor& x, double tau) {
  if (x.size() == 0) throw ValidationError("lse_pool: empty input");
  const double m = x.value().maxCoeff();
  Tensor shifted = (x - m) * (1.0 / tau);
  return ag::log(ag::mean(ag::exp(shifted))) * tau + m;
}

CoarseImage coarse_image(const Tensor& patch_probs, int k, std::optional<int> y_v) {
  if (k < 1 || k > patch_probs.size()) throw ConfigError("coarse_image: K out of range");
  CoarseImage out;
  out.y_coarse = topk_mean(patch_probs, k);
  if (y_v) {
    if (*y_v != 0 && *y_v != 1) throw ValidationError("coarse_image: y_v must be 0 or 1");
    out.loss = ag::binary_cross_entropy(out.y_coarse, *y_v);
  }
  return out;
}

Tensor boxes_tensor(std::span<const Box> boxes) {
  Mat m(static_cast<ag::Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto r = static_cast<ag::Index>(i);
    m(r, 0) = boxes[i].cx;
    m(r, 1) = boxes[i].cy;
    m(r, 2) = boxes[i].w;
    m(r, 3) = boxes[i].h;
  }
  return ag::constant(std::move(m));
}

Tensor soft_mask(const Tensor& boxes, int grid_side, double tau1) {
  if (grid_side < 1) throw ConfigError("soft_mask: grid side must be >= 1");
  if (boxes.cols() != 4 || boxes.rows() < 1) throw ValidationError("soft_mask: boxes must be n x 4");
  for (ag::Index i = 0; i < boxes.rows(); ++i) {
    if (!(boxes.value()(i, 2) > 0 && boxes.value()(i, 3) > 0)) {
      throw ValidationError("soft_mask: degenerate box (w or h <= 0)");
    }
  }
  const int n_patches = grid_side * grid_side;
  const double scale = grid_side;
  Mat px(1, n_patches), py(1, n_patches);
  for (int j = 0; j < n_patches; ++j) {
    px(0, j) = j % grid_side + 0.5;
    py(0, j) = j / grid_side + 0.5;
  }
  Tensor cx = ag::slice_cols(boxes, 0, 1) * scale;
  Tensor cy = ag::slice_cols(boxes, 1, 1) * scale;
  Tensor half_w = ag::slice_cols(boxes, 2, 1) * (scale / 2);
  Tensor half_h = ag::slice_cols(boxes, 3, 1) * (scale / 2);
  Tensor ax = (half_w - ag::abs(ag::constant(px) - cx)) * tau1;
  Tensor ay = (half_h - ag::abs(ag::constant(py) - cy)) * tau1;
  return ag::sigmoid(ax) * ag::sigmoid(ay);
}

Tensor soft_mask(std::span<const Box> boxes, int grid_side, double tau1) {
  return soft_mask(boxes_tensor(boxes), grid_side, tau1);
}

CandidateScores dual_branch_scores(const Tensor& p_patch, const Tensor& sim,
                                   const Tensor& mask_hat, const Tensor& alpha) {
  if (p_patch.cols() != 1 || sim.cols() != 1 || p_patch.rows() != sim.rows() ||
      mask_hat.cols() != p_patch.rows()) {
    throw ValidationError("dual_branch_scores: shape mismatch");
  }
  CandidateScores out;
  out.s_iv = ag::matmul(mask_hat, p_patch);
  out.s_ev = ag::matmul(mask_hat, sim);
  out.s_v = out.s_iv + out.s_ev * alpha;
  const Mat& sv = out.s_v.value();
  int best = 0;
  for (ag::Index i = 1; i < sv.rows(); ++i) {
    if (sv(i, 0) > sv(best, 0)) best = static_cast<int>(i);
  }
  out.best_idx = best;
  out.m_star = ag::slice_rows(mask_hat, best, 1);
  return out;
}

ScopeGated scope_gated_aggregate(const Tensor& s_v, const Tensor& p_patch, bool valid, double tau2) {
  ScopeGated out;
  out.a_local = lse_pool(s_v, tau2);
  out.a_global = lse_pool(p_patch, tau2);
  out.y_fine = ag::clamp(valid ? out.a_local : out.a_global, 1e-6, 1.0 - 1e-6);
  return out;
}

std::vector<char> background_indicator(const Mat& m_star, double eps) {
  std::vector<char> bg(static_cast<std::size_t>(m_star.size()));
  for (ag::Index j = 0; j < m_star.size(); ++j) bg[static_cast<std::size_t>(j)] = m_star.data()[j] < eps;
  return bg;
}

Tensor background_silencing_loss(const Tensor& p_patch, std::span<const char> background) {
  if (static_cast<ag::Index>(background.size()) != p_patch.size()) {
    throw ValidationError("background_silencing_loss: indicator length mismatch");
  }
  std::vector<ag::Index> idx;
  for (std::size_t j = 0; j < background.size(); ++j) {
    if (background[j]) idx.push_back(static_cast<ag::Index>(j));
  }
  if (idx.empty()) return ag::scalar(0.0);
  return ag::mean(ag::binary_cross_entropy(ag::gather(p_patch, idx), 0.0));
}

Mat spatial_kernel(int grid_side, double sigma) {
  const int n = grid_side * grid_side;
  Mat k(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double dx = i % grid_side - j % grid_side;
      const double dy = i / grid_side - j / grid_side;
      k(i, j) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
  return k;
}

Tensor spatial_similarity(const Tensor& features, const Mat& kernel) {
  Tensor unit = ag::l2_normalize_rows(features);
  return ag::matmul(unit, ag::transpose(unit)) * ag::constant(kernel);
}

std::optional<Tensor> spatial_contrast_loss(const Tensor& features, std::span<const char> background,
                                            const Mat& kernel, int k1, double delta1) {
  const ag::Index n = features.rows();
  if (static_cast<ag::Index>(background.size()) != n || kernel.rows() != n || kernel.cols() != n) {
    throw ValidationError("spatial_contrast_loss: shape mismatch");
  }
  std::vector<ag::Index> fake, real;
  for (ag::Index j = 0; j < n; ++j) (background[static_cast<std::size_t>(j)] ? real : fake).push_back(j);
  if (fake.size() < 2 || real.empty()) return std::nullopt;

  Tensor sim = spatial_similarity(features, kernel);
  const Mat& h = sim.value();

  std::vector<ag::Index> pairs;
  pairs.reserve(fake.size() * (fake.size() - 1));
  for (ag::Index i : fake) {
    for (ag::Index j : fake) {
      if (i != j) pairs.push_back(i * n + j);
    }
  }
  Tensor pull = ag::mean(ag::relu(delta1 - ag::gather(sim, pairs)));

  const int k = std::min<int>(k1, static_cast<int>(real.size()));
  std::vector<ag::Index> negatives;
  negatives.reserve(fake.size() * static_cast<std::size_t>(k));
  Mat row(1, static_cast<ag::Index>(real.size()));
  for (ag::Index i : fake) {
    for (std::size_t c = 0; c < real.size(); ++c) row(0, static_cast<ag::Index>(c)) = h(i, real[c]);
    for (ag::Index c : topk_indices(row, k)) negatives.push_back(i * n + real[static_cast<std::size_t>(c)]);
  }
  Tensor push = ag::mean(ag::relu(delta1 + ag::gather(sim, negatives)));
  return pull + push;
}

TrpsHead::TrpsHead(nn::ParamStore& store, int embed_dim, std::mt19937_64& rng)
    : alpha(store.add("trps.alpha", Mat::Constant(1, 1, 1.0))),
      patch_head_(store, "trps.patch_head", embed_dim, 1, rng),
      proj_v_(store, "trps.proj_v", embed_dim, embed_dim, rng),
      proj_t_(store, "trps.proj_t", embed_dim, embed_dim, rng) {}

Tensor TrpsHead::patch_probs(const Tensor& v_pat_hat) const {
  return ag::sigmoid(patch_head_(v_pat_hat));
}

Tensor TrpsHead::explicit_similarity(const Tensor& v_pat, const Tensor& t_cls) const {
  Tensor pv = ag::l2_normalize_rows(proj_v_(v_pat));
  Tensor pt = ag::l2_normalize_rows(proj_t_(t_cls));
  return ag::matmul(pv, ag::transpose(pt));
}

}  // namespace ciec::trps
