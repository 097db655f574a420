#include "ciec/gradcheck.hpp"

#include <fmt/format.h>

#include <memory>
#include <ostream>
#include <random>

#include "ciec/box.hpp"
#include "ciec/encoders_cfa.hpp"
#include "ciec/nn.hpp"
#include "ciec/oracle.hpp"
#include "ciec/trps.hpp"
#include "ciec/vctg.hpp"

namespace ciec::gradcheck {

namespace {

using ag::Mat;
using ag::Tensor;

constexpr int kGrid = 4;
constexpr int kPatches = kGrid * kGrid;
constexpr int kDim = 6;
constexpr int kTokens = 7;

Tensor leaf(Mat m) { return Tensor(std::move(m), true); }

Mat gaussian(std::mt19937_64& rng, int rows, int cols, double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> d(mean, sd);
  Mat m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

std::vector<std::vector<char>> token_masks(bool with_stop) {
  // Positions 5 and 6 are padding; position 2 is a stop word when requested.
  std::vector<char> padding = {1, 1, 1, 1, 1, 0, 0};
  std::vector<char> content = padding;
  if (with_stop) content[2] = 0;
  return {padding, content};
}

}  // namespace

CheckResult check(const std::string& name, std::vector<Tensor> leaves, const std::function<Tensor()>& loss,
                  double h, double tol) {
  CheckResult r;
  r.name = name;
  for (auto& t : leaves) t.zero_grad();
  Tensor l = loss();
  r.loss = l.item();
  l.backward();

  std::vector<double> x, analytic;
  for (const auto& t : leaves) {
    for (ag::Index i = 0; i < t.size(); ++i) {
      x.push_back(t.value().data()[i]);
      analytic.push_back(t.has_grad() ? t.grad().data()[i] : 0.0);
    }
  }
  auto f = [&](std::span<const double> probe) {
    std::size_t k = 0;
    for (auto& t : leaves) {
      for (ag::Index i = 0; i < t.size(); ++i) t.mutable_value().data()[i] = probe[k++];
    }
    ag::NoGradGuard no_grad;
    return loss().item();
  };
  const auto numeric = oracle::finite_diff_grad(f, x, h);
  f(x);
  r.coordinates = static_cast<int>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.max_rel_error = std::max(r.max_rel_error, oracle::relative_error(analytic[i], numeric[i]));
  }
  r.passed = r.max_rel_error <= tol;
  return r;
}

std::vector<CheckResult> run_all(std::uint64_t seed, double h, double tol) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto store = std::make_shared<nn::ParamStore>();

  {
    model::BicHead head(*store, kDim, rng);
    std::vector<Tensor> leaves = {leaf(gaussian(rng, 1, kDim)), leaf(gaussian(rng, 1, kDim)),
                                  leaf(gaussian(rng, 1, kDim)), leaf(gaussian(rng, 1, kDim))};
    for (const auto& [n, t] : store->entries()) leaves.push_back(t);
    auto loss = [=] {
      std::vector<Tensor> probs = {head(leaves[0], leaves[1]), head(leaves[2], leaves[3])};
      std::vector<int> labels = {1, 0};
      return model::bic_loss(probs, labels);
    };
    out.push_back(check("L_BIC", leaves, loss, h, tol));
  }

  {
    Tensor logits = leaf(gaussian(rng, kPatches, 1));
    auto loss = [=] {
      return ag::binary_cross_entropy(trps::topk_mean(ag::sigmoid(logits), 3), 1.0) +
             ag::binary_cross_entropy(trps::topk_mean(ag::sigmoid(logits * 0.5), 2), 0.0);
    };
    out.push_back(check("L_v_Coarse", {logits}, loss, h, tol));
  }

  {
    // Small boxes and low patch probabilities keep S_v inside the clamp so
    // the box-coordinate path is exercised.
    Tensor logits = leaf(gaussian(rng, kPatches, 1, -1.5, 0.8));
    Tensor sim = leaf(gaussian(rng, kPatches, 1, 0.0, 0.2));
    Tensor alpha = leaf(Mat::Constant(1, 1, 0.7));
    Mat b(3, 4);
    b << 0.30, 0.40, 0.30, 0.25,  //
        0.62, 0.55, 0.20, 0.30,   //
        0.45, 0.70, 0.25, 0.20;
    Tensor boxes = leaf(b);
    auto loss = [=] {
      Tensor p = ag::sigmoid(logits);
      Tensor masks = trps::soft_mask(boxes, kGrid, 2.0);
      auto scores = trps::dual_branch_scores(p, sim, masks, alpha);
      auto local = trps::scope_gated_aggregate(scores.s_v, p, true, 0.1);
      auto global = trps::scope_gated_aggregate(scores.s_v, p, false, 0.1);
      return ag::binary_cross_entropy(local.y_fine, 1.0) + ag::binary_cross_entropy(global.y_fine, 0.0);
    };
    out.push_back(check("L_v_Fine", {logits, sim, alpha, boxes}, loss, h, tol));
  }

  {
    Tensor logits = leaf(gaussian(rng, kPatches, 1));
    const Box box{0.4, 0.4, 0.4, 0.4};
    const Mat m_star = trps::soft_mask(std::span<const Box>(&box, 1), kGrid, 2.0).value();
    const auto bg = trps::background_indicator(m_star, 0.1);
    auto loss = [=] { return trps::background_silencing_loss(ag::sigmoid(logits), bg); };
    out.push_back(check("L_Bsc", {logits}, loss, h, tol));
  }

  {
    Tensor features = leaf(gaussian(rng, kPatches, kDim));
    std::vector<char> bg(kPatches, 1);
    for (int j : {5, 6, 9, 10}) bg[static_cast<std::size_t>(j)] = 0;
    const Mat kernel = trps::spatial_kernel(kGrid, kGrid / 4.0);
    auto loss = [=] { return *trps::spatial_contrast_loss(features, bg, kernel, 5, 0.2); };
    out.push_back(check("L_Sce", {features}, loss, h, tol));
  }

  {
    Tensor logits = leaf(gaussian(rng, kTokens, 1));
    const auto masks = token_masks(true);
    auto loss = [=] {
      return ag::binary_cross_entropy(vctg::coarse_text(ag::sigmoid(logits), masks[1], 2, std::nullopt).y_coarse, 1.0);
    };
    out.push_back(check("L_t_Coarse", {logits}, loss, h, tol));
  }

  {
    vctg::VctgHead head(*store, kDim, rng);
    Tensor t_tok_hat = leaf(gaussian(rng, kTokens, kDim));
    Tensor s_raw = leaf(gaussian(rng, kTokens, 1));
    const auto masks = token_masks(true);
    std::vector<Tensor> leaves = {t_tok_hat, s_raw, head.eta, head.beta, head.w_it, head.w_et};
    auto loss = [=] {
      Tensor s_it = head.intrinsic_scores(t_tok_hat, masks[0], masks[1]);
      Tensor s_et = vctg::extrinsic_scores(s_raw, masks[1], head.eta, head.beta);
      Tensor s_t = vctg::fuse_scores(s_it, s_et, head.w_it, head.w_et);
      return ag::binary_cross_entropy(head.fine_prob(s_t, t_tok_hat), 1.0);
    };
    out.push_back(check("L_t_Fine", leaves, loss, h, tol));
  }

  {
    const auto masks = token_masks(true);
    std::vector<Tensor> logits = {leaf(gaussian(rng, kTokens, 1)), leaf(gaussian(rng, kTokens, 1)),
                                  leaf(gaussian(rng, kTokens, 1))};
    Mat content_col(kTokens, 1);
    for (int i = 0; i < kTokens; ++i) content_col(i, 0) = masks[1][static_cast<std::size_t>(i)];
    const Tensor content_mask = ag::constant(content_col);
    auto loss = [=] {
      std::vector<Tensor> s_t;
      for (const auto& l : logits) s_t.push_back(ag::sigmoid(l) * content_mask);
      std::vector<int> y_t = {0, 1, 1};
      std::vector<std::vector<char>> content(3, masks[1]);
      return vctg::asymmetric_sparse_loss(s_t, y_t, content, 2.0, 0.4).total;
    };
    out.push_back(check("L_Asc", logits, loss, h, tol));
  }

  {
    const auto masks = token_masks(false);
    std::vector<Tensor> raw = {leaf(gaussian(rng, kTokens, 1, 0.0, 0.3)), leaf(gaussian(rng, kTokens, 1, 0.0, 0.3)),
                               leaf(gaussian(rng, kTokens, 1, 0.0, 0.3)), leaf(gaussian(rng, kTokens, 1, 0.0, 0.3))};
    // Shift the authentic pair down so the margin term is active.
    raw[0].mutable_value().array() -= 0.5;
    auto loss = [=] {
      std::vector<int> y_v = {0, 0, 0, 1};
      std::vector<int> y_t = {0, 1, 1, 0};
      std::vector<std::vector<char>> padding(4, masks[0]);
      return vctg::semantic_consistency_loss(raw, y_v, y_t, padding, 0.1);
    };
    out.push_back(check("L_Scc", raw, loss, h, tol));
  }
  return out;
}

void write_table(std::ostream& out, const std::vector<CheckResult>& results) {
  out << fmt::format("{:<12} {:>7} {:>14} {:>14}  {}\n", "loss", "coords", "loss value", "max rel err", "result");
  for (const auto& r : results) {
    out << fmt::format("{:<12} {:>7} {:>14.6g} {:>14.3e}  {}\n", r.name, r.coordinates, r.loss, r.max_rel_error,
                       r.passed ? "PASS" : "FAIL");
  }
}

}  // namespace ciec::gradcheck
