#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ciec/errors.hpp"
#include "ciec/oracle.hpp"
#include "ciec/trps.hpp"

using namespace ciec;
using namespace ciec::trps;

namespace {

Tensor column(std::vector<double> v) {
  Mat m(static_cast<ag::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<ag::Index>(i), 0) = v[i];
  return ag::constant(std::move(m));
}

std::vector<double> as_vector(const Mat& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace

TEST(Trps, DefaultHyperparameters) {
  TrpsHyper h;
  EXPECT_EQ(h.tau1, 2.0);
  EXPECT_EQ(h.tau2, 0.1);
  EXPECT_EQ(h.eps, 0.1);
  EXPECT_EQ(h.delta1, 0.2);
  EXPECT_EQ(h.k1, 5);
  EXPECT_EQ(TrpsHyper::default_k_coarse(64), 4);
  EXPECT_EQ(TrpsHyper::default_k_coarse(4), 1);
  EXPECT_EQ(h.k_coarse, TrpsHyper::default_k_coarse(64));
  h.k_coarse = 65;
  EXPECT_THROW(h.validate(64), ConfigError);
}

TEST(Trps, TopKMeanExamples) {
  EXPECT_NEAR(topk_mean(column({0.9, 0.1, 0.8, 0.2}), 2).item(), 0.85, 1e-15);
  EXPECT_EQ(topk_mean(column({0.3, 0.7, 0.5}), 1).item(), 0.7);
  EXPECT_NEAR(topk_mean(column({0.4, 0.4, 0.4}), 3).item(), 0.4, 1e-15);
  EXPECT_THROW(topk_mean(column({0.1}), 2), ConfigError);
}

TEST(Trps, TopKTieBreakLowestIndex) {
  Mat v(1, 4);
  v << 0.5, 0.9, 0.5, 0.5;
  auto idx = topk_indices(v, 3);
  EXPECT_EQ(idx, (std::vector<ag::Index>{1, 0, 2}));
}

TEST(Trps, TopKMonotoneAndLimits) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> len(2, 20);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(static_cast<std::size_t>(len(rng)));
    for (double& v : x) v = u(rng);
    const int n = static_cast<int>(x.size());
    std::uniform_int_distribution<int> kd(1, n);
    const int k = kd(rng);
    const double before = topk_mean(column(x), k).item();
    auto bigger = x;
    bigger.push_back(*std::max_element(x.begin(), x.end()) + u(rng));
    EXPECT_GE(topk_mean(column(bigger), k).item(), before);
    EXPECT_EQ(topk_mean(column(x), 1).item(), *std::max_element(x.begin(), x.end()));
    double mean = 0;
    for (double v : x) mean += v;
    EXPECT_NEAR(topk_mean(column(x), n).item(), mean / n, 1e-12);
  }
}

TEST(Trps, LseExamples) {
  EXPECT_NEAR(lse_pool(column({0.37, 0.37, 0.37}), 0.1).item(), 0.37, 1e-15);
  EXPECT_NEAR(lse_pool(column({0.0, 1.0}), 0.1).item(), 0.9306898218339272, 1e-12);
  // Large inputs stay finite thanks to max subtraction.
  EXPECT_NEAR(lse_pool(column({1000.0, 1000.0}), 0.01).item(), 1000.0, 1e-9);
}

TEST(Trps, LseSandwichAndConvergence) {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> n(0, 1);
  std::uniform_int_distribution<int> len(1, 16);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(static_cast<std::size_t>(len(rng)));
    for (double& v : x) v = n(rng);
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    const double mx = *std::max_element(x.begin(), x.end());
    const double tau = 0.1;
    const double l = lse_pool(column(x), tau).item();
    EXPECT_GE(l, mean - 1e-12);
    EXPECT_LE(l, mx + tau * std::log(static_cast<double>(x.size())) + 1e-12);
    double prev_gap = std::abs(l - mx);
    for (double tt : {0.01, 0.001}) {
      const double gap = std::abs(lse_pool(column(x), tt).item() - mx);
      EXPECT_LE(gap, prev_gap + 1e-12);
      prev_gap = gap;
    }
  }
}

TEST(Trps, SoftMaskExamples) {
  const Box b{0.5, 0.5, 0.5, 0.5};
  Mat m = soft_mask(std::span<const Box>(&b, 1), 8, 2.0).value();
  EXPECT_NEAR(m(0, 3 * 8 + 3), 0.9073974670915214, 1e-12);
  // Patch column 1 has center 1.5; a box with left edge at 1.5/8 and a tall
  // extent puts the center exactly on the x edge.
  const Box edge{(1.5 + 2.0) / 8.0, 0.5, 4.0 / 8.0, 1.0};
  Mat e = soft_mask(std::span<const Box>(&edge, 1), 8, 2.0).value();
  EXPECT_NEAR(e(0, 4 * 8 + 1), 0.5 * (1.0 / (1.0 + std::exp(-2.0 * 3.5))), 1e-12);
  EXPECT_NEAR(e(0, 4 * 8 + 1), 0.5, 1e-3);
  const Box corner{0.1, 0.1, 0.1, 0.1};
  Mat far = soft_mask(std::span<const Box>(&corner, 1), 8, 2.0).value();
  EXPECT_LT(far(0, 63), 1e-3);
}

TEST(Trps, SoftMaskMatchesOracleAndStaysInOpenInterval) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> c(0, 1), s(0.05, 1);
  for (int t = 0; t < 200; ++t) {
    const Box b{c(rng), c(rng), s(rng), s(rng)};
    Mat m = soft_mask(std::span<const Box>(&b, 1), 8, 2.0).value();
    for (int j = 0; j < 64; ++j) {
      EXPECT_GT(m(0, j), 0.0);
      EXPECT_LT(m(0, j), 1.0);
      EXPECT_NEAR(m(0, j), oracle::reference_soft_mask_value(b.cx, b.cy, b.w, b.h, j % 8, j / 8, 8, 2.0), 1e-12);
    }
  }
}

TEST(Trps, SoftMaskMonotoneAwayFromCenter) {
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> c(0, 1), sd(0.1, 0.6);
  for (int t = 0; t < 100; ++t) {
    const Box b{c(rng), c(rng), sd(rng), sd(rng)};
    Mat m = soft_mask(std::span<const Box>(&b, 1), 8, 2.0).value();
    auto dx = [&](int col) { return std::abs(col + 0.5 - 8 * b.cx); };
    auto dy = [&](int row) { return std::abs(row + 0.5 - 8 * b.cy); };
    for (int fixed = 0; fixed < 8; ++fixed) {
      for (int a = 0; a < 8; ++a) {
        for (int z = 0; z < 8; ++z) {
          if (dx(a) <= dx(z)) EXPECT_GE(m(0, fixed * 8 + a), m(0, fixed * 8 + z));
          if (dy(a) <= dy(z)) EXPECT_GE(m(0, a * 8 + fixed), m(0, z * 8 + fixed));
        }
      }
    }
  }
}

TEST(Trps, SoftMaskBoxGradientNearEdgeOnly) {
  Mat bm(1, 4);
  bm << 0.5, 0.5, 0.25, 0.25;
  Tensor boxes(bm, true);
  Tensor m = soft_mask(boxes, 8, 2.0);
  // Patch at column 2 (center 2.5) sits 0.5 outside the left edge at 3.0.
  ag::slice_cols(m, 4 * 8 + 2, 1).backward();
  EXPECT_GT(std::abs(boxes.grad()(0, 0)), 1e-3);
  boxes.zero_grad();
  Mat big(1, 4);
  big << 0.1, 0.1, 0.05, 0.05;
  Tensor small_box(big, true);
  Tensor m2 = soft_mask(small_box, 16, 2.0);
  ag::slice_cols(m2, 255, 1).backward();
  EXPECT_LT(std::abs(small_box.grad()(0, 0)), 1e-6);
}

TEST(Trps, SoftMaskRejectsDegenerateBox) {
  const Box b{0.5, 0.5, 0.0, 0.3};
  EXPECT_THROW(soft_mask(std::span<const Box>(&b, 1), 8, 2.0), ValidationError);
}

TEST(Trps, DualBranchExamples) {
  Tensor p = column({0.7, 0.1, 0.2, 0.3});
  Tensor sim = column({0.5, -0.2, 0.1, 0.9});
  Mat zero = Mat::Zero(3, 4);
  auto z = dual_branch_scores(p, sim, ag::constant(zero), ag::scalar(1.0));
  EXPECT_TRUE(z.s_v.value().isZero());
  EXPECT_EQ(z.best_idx, 0);

  Mat single = Mat::Zero(1, 4);
  single(0, 0) = 1.0;
  auto one = dual_branch_scores(p, sim, ag::constant(single), ag::scalar(0.0));
  EXPECT_NEAR(one.s_iv.item(), 0.7, 1e-15);

  Mat masks(2, 4);
  masks << 0.2, 0.9, 0.4, 0.1, 0.6, 0.3, 0.7, 0.8;
  auto no_alpha = dual_branch_scores(p, sim, ag::constant(masks), ag::scalar(0.0));
  EXPECT_EQ(no_alpha.s_v.value(), no_alpha.s_iv.value());
  EXPECT_EQ(no_alpha.m_star.value(), masks.row(no_alpha.best_idx));
}

TEST(Trps, BestIdxInvariantToScalingSingleActiveBranch) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(-1, 1), pos(0.01, 1);
  for (int t = 0; t < 200; ++t) {
    Mat masks(5, 16);
    for (ag::Index i = 0; i < masks.size(); ++i) masks.data()[i] = pos(rng);
    Mat s(16, 1);
    for (ag::Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
    Tensor zero_p = ag::constant(Mat::Zero(16, 1));
    const int base = dual_branch_scores(zero_p, ag::constant(s), ag::constant(masks), ag::scalar(1.0)).best_idx;
    const int scaled =
        dual_branch_scores(zero_p, ag::constant(s * (0.1 + 5 * pos(rng))), ag::constant(masks), ag::scalar(1.0)).best_idx;
    EXPECT_EQ(base, scaled);
  }
}

TEST(Trps, BestIdxMatchesBruteForce) {
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> u(0, 1), c(-1, 1);
  for (int t = 0; t < 500; ++t) {
    std::vector<Box> boxes;
    for (int i = 0; i < 5; ++i) boxes.push_back({u(rng), u(rng), 0.1 + 0.5 * u(rng), 0.1 + 0.5 * u(rng)});
    std::vector<double> p(64), s(64);
    for (double& v : p) v = u(rng);
    for (double& v : s) v = c(rng);
    const double alpha = 2 * c(rng);
    Tensor masks = soft_mask(boxes, 8, 2.0);
    auto scores = dual_branch_scores(column(p), column(s), masks, ag::scalar(alpha));
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 5; ++i) {
      rows.emplace_back();
      for (int j = 0; j < 64; ++j) {
        rows.back().push_back(oracle::reference_soft_mask_value(boxes[i].cx, boxes[i].cy, boxes[i].w, boxes[i].h,
                                                                j % 8, j / 8, 8, 2.0));
      }
    }
    EXPECT_EQ(scores.best_idx, oracle::brute_force_best_box(p, s, rows, alpha));
  }
}

TEST(Trps, ScopeGateExclusivity) {
  Tensor sv(column({0.2, 0.6, 0.4}).value(), true);
  Tensor pp(column({0.1, 0.3, 0.2, 0.8}).value(), true);
  auto local = scope_gated_aggregate(sv, pp, true, 0.1);
  local.y_fine.backward();
  EXPECT_FALSE(pp.has_grad() && !pp.grad().isZero());
  EXPECT_TRUE(sv.has_grad());
  sv.zero_grad();
  pp.zero_grad();
  auto global = scope_gated_aggregate(sv, pp, false, 0.1);
  global.y_fine.backward();
  EXPECT_FALSE(sv.has_grad() && !sv.grad().isZero());
  EXPECT_TRUE(pp.has_grad());
  EXPECT_NEAR(scope_gated_aggregate(sv, column({0.0, 1.0}), false, 0.1).y_fine.item(), 0.9306898218339272, 1e-12);
}

TEST(Trps, ScopeGateClampsToOpenInterval) {
  auto big = scope_gated_aggregate(column({3.0, 4.0}), column({0.5}), true, 0.1);
  EXPECT_EQ(big.y_fine.item(), 1.0 - 1e-6);
}

TEST(Trps, BackgroundSilencingExamples) {
  std::vector<char> bg = {1, 1, 0, 1};
  EXPECT_NEAR(background_silencing_loss(column({0.0, 0.0, 0.9, 0.0}), bg).item(), 0.0, 1e-11);
  std::vector<char> single = {0, 1, 0};
  EXPECT_NEAR(background_silencing_loss(column({0.9, 0.5, 0.2}), single).item(), std::log(2.0), 1e-15);
  std::vector<char> none = {0, 0};
  EXPECT_EQ(background_silencing_loss(column({0.9, 0.5}), none).item(), 0.0);

  Mat m_star(1, 4);
  m_star << 0.05, 0.1, 0.5, 0.09;
  EXPECT_EQ(background_indicator(m_star, 0.1), (std::vector<char>{1, 0, 0, 1}));
}

TEST(Trps, SpatialContrastExamples) {
  const Mat kernel = spatial_kernel(2, 0.5);
  EXPECT_EQ(kernel(0, 0), 1.0);
  // Fake patches 0 and 1 share a direction; the true patches point opposite.
  Mat f(4, 2);
  f << 1, 0, 1, 0, -1, 0, -1, 0;
  std::vector<char> bg = {0, 0, 1, 1};
  // H(0,1) = cos 1 * kernel(0,1) = exp(-2) < delta: pull term is active.
  const double k01 = std::exp(-1.0 / (2 * 0.25));
  auto loss = spatial_contrast_loss(ag::constant(f), bg, kernel, 5, 0.2);
  ASSERT_TRUE(loss.has_value());
  const double pull = 0.2 - k01;
  // Push: H(0,2)=-k01, H(0,3)=-kernel(0,3); both relu(0.2 + H).
  const double k03 = std::exp(-2.0 / (2 * 0.25));
  const double push = (std::max(0.0, 0.2 - k01) + std::max(0.0, 0.2 - k03)) / 2.0;
  EXPECT_NEAR(loss->item(), pull + push, 1e-12);

  const Mat flat = Mat::Ones(4, 4);
  auto satisfied = spatial_contrast_loss(ag::constant(f), bg, flat, 5, 0.2);
  EXPECT_NEAR(satisfied->item(), 0.0, 1e-15);

  Mat g(3, 2);
  g << 1, 0, 1, 0, 1, 0;
  std::vector<char> bg3 = {0, 0, 1};
  auto all_similar = spatial_contrast_loss(ag::constant(g), bg3, Mat::Ones(3, 3), 5, 0.2);
  EXPECT_NEAR(all_similar->item(), 1.2, 1e-12);

  std::vector<char> one_fake = {0, 1, 1, 1};
  EXPECT_FALSE(spatial_contrast_loss(ag::constant(f), one_fake, kernel, 5, 0.2).has_value());
  std::vector<char> no_true = {0, 0, 0, 0};
  EXPECT_FALSE(spatial_contrast_loss(ag::constant(f), no_true, kernel, 5, 0.2).has_value());
}

TEST(Trps, CoarseImageLoss) {
  auto c = coarse_image(column({0.5, 0.1, 0.5}), 2, 1);
  EXPECT_NEAR(c.y_coarse.item(), 0.5, 1e-15);
  EXPECT_NEAR(c.loss.item(), std::log(2.0), 1e-15);
  EXPECT_THROW(coarse_image(column({0.5}), 1, 2), ValidationError);
}

TEST(Trps, HeadInitialisesAlphaToOne) {
  nn::ParamStore store;
  std::mt19937_64 rng(1);
  TrpsHead head(store, 8, rng);
  EXPECT_EQ(head.alpha.item(), 1.0);
  Mat v = Mat::Random(5, 8);
  Mat t = Mat::Random(1, 8);
  Mat sim = head.explicit_similarity(ag::constant(v), ag::constant(t)).value();
  EXPECT_EQ(sim.rows(), 5);
  EXPECT_LE(sim.cwiseAbs().maxCoeff(), 1.0 + 1e-12);
  Mat p = head.patch_probs(ag::constant(v)).value();
  EXPECT_GT(p.minCoeff(), 0.0);
  EXPECT_LT(p.maxCoeff(), 1.0);
}
