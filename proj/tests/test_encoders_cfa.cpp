#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ciec/encoders_cfa.hpp"
#include "ciec/errors.hpp"
#include "ciec/gradcheck.hpp"

using namespace ciec;
using namespace ciec::model;

namespace {

struct Fixture {
  CfaConfig cfg;
  nn::ParamStore store;
  std::mt19937_64 rng{3};
  ImageEncoder image;
  TextEncoder text;
  CrossModalAlignment cfa;

  explicit Fixture(int layers = 2) {
    cfg.layers = layers;
    image = ImageEncoder(store, 64, 16, cfg, rng);
    text = TextEncoder(store, 16, 64, cfg, rng);
    cfa = CrossModalAlignment(store, cfg, rng);
  }
};

std::vector<int> tokens(int real) {
  std::vector<int> t(16, 0);
  for (int i = 0; i < real; ++i) t[i] = 10 + i;
  return t;
}

std::vector<char> padding(int real) {
  std::vector<char> m(16, 0);
  for (int i = 0; i < real; ++i) m[i] = 1;
  return m;
}

std::vector<char> text_valid(const std::vector<char>& pad) {
  std::vector<char> v(pad.size() + 1, 1);
  std::copy(pad.begin(), pad.end(), v.begin() + 1);
  return v;
}

}  // namespace

TEST(Encoders, ConfigValidation) {
  CfaConfig c;
  EXPECT_EQ(c.layers, 2);
  EXPECT_EQ(c.embed_dim, 32);
  EXPECT_EQ(c.ffn_ratio, 2);
  c.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoders, ImageShapesAndDeterminism) {
  Fixture f;
  Mat patches = Mat::Random(64, 16);
  auto a = f.image(patches);
  EXPECT_EQ(a.seq.rows(), 64);
  EXPECT_EQ(a.seq.cols(), 32);
  EXPECT_EQ(a.cls.rows(), 1);
  EXPECT_EQ(a.cls.cols(), 32);
  Fixture g;
  EXPECT_EQ(g.image(patches).seq.value(), a.seq.value());
  EXPECT_THROW(f.image(Mat::Random(63, 16)), ConfigError);
}

TEST(Encoders, IdenticalPatchesDifferOnlyByPosition) {
  Fixture f;
  Mat same = Mat::Ones(64, 16) * 0.3;
  auto out = f.image(same).seq.value();
  // Rows differ because the position encodings differ.
  EXPECT_GT((out.row(0) - out.row(1)).norm(), 1e-6);
  // Removing the position encodings makes every row identical.
  f.store.get("image.pos").mutable_value().setZero();
  auto flat = f.image(same).seq.value();
  for (int r = 1; r < 64; ++r) EXPECT_LT((flat.row(r) - flat.row(0)).norm(), 1e-10);
}

TEST(Encoders, TextShapesAndPaddingMask) {
  Fixture f;
  auto t = tokens(9);
  auto p = padding(9);
  auto a = f.text(t, p);
  EXPECT_EQ(a.seq.rows(), 16);
  EXPECT_EQ(a.seq.cols(), 32);
  auto t2 = t;
  for (int i = 9; i < 16; ++i) t2[i] = 40 + i;  // garbage ids under padding
  EXPECT_EQ(f.text(t2, p).cls.value(), a.cls.value());
  auto t3 = t;
  std::swap(t3[1], t3[4]);
  EXPECT_GT((f.text(t3, p).cls.value() - a.cls.value()).norm(), 1e-9);
}

TEST(Encoders, PaddingGetsNoGradientThroughCls) {
  Fixture f;
  auto t = tokens(6);
  auto p = padding(6);
  auto enc = f.text(t, p);
  // LayerNorm output has a constant sum, so project onto a fixed random direction.
  std::mt19937_64 rng(5);
  Mat dir = Mat::NullaryExpr(1, enc.cls.cols(), [&] { return std::normal_distribution<double>(0, 1)(rng); });
  ag::sum(enc.cls * ag::constant(dir)).backward();
  const Mat& g = f.store.get("text.embedding").grad();
  // Token ids 10..15 are real; id 0 (padding) must receive nothing.
  EXPECT_TRUE(g.row(0).isZero());
  EXPECT_FALSE(g.row(10).isZero());
}

TEST(Encoders, ZeroLayerAlignmentIsIdentity) {
  Fixture f(0);
  EXPECT_EQ(f.cfa.depth(), 0);
  Mat v = Mat::Random(65, 32), t = Mat::Random(17, 32);
  auto [vh, th] = f.cfa(ag::constant(v), ag::constant(t), text_valid(padding(16)));
  EXPECT_EQ(vh.value(), v);
  EXPECT_EQ(th.value(), t);
}

TEST(Encoders, AlignmentPreservesShapesAndUsesCrossAttention) {
  Fixture f;
  EXPECT_EQ(f.cfa.depth(), 2);
  auto img = f.image(Mat::Random(64, 16));
  auto p = padding(12);
  auto txt = f.text(tokens(12), p);
  auto [vh, th] = f.cfa(with_cls(img), with_cls(txt), text_valid(p));
  EXPECT_EQ(vh.rows(), 65);
  EXPECT_EQ(vh.cols(), 32);
  EXPECT_EQ(th.rows(), 17);
  auto [vz, tz] = f.cfa(with_cls(img), ag::constant(Mat::Zero(17, 32)), text_valid(p));
  EXPECT_GT((vz.value() - vh.value()).norm(), 1e-6);
  EXPECT_TRUE(vh.value().allFinite());
}

TEST(Encoders, BicLossExamples) {
  std::vector<Tensor> half = {ag::scalar(0.5)};
  std::vector<int> one = {1};
  EXPECT_NEAR(bic_loss(half, one).item(), std::log(2.0), 1e-15);
  std::vector<Tensor> sure = {ag::scalar(1.0 - 1e-7)};
  EXPECT_NEAR(bic_loss(sure, one).item(), 1e-7, 1e-12);
  std::vector<Tensor> two = {ag::scalar(0.8), ag::scalar(0.3)};
  std::vector<int> labels = {1, 0};
  EXPECT_NEAR(bic_loss(two, labels).item(), (-std::log(0.8) - std::log(0.7)) / 2.0, 1e-15);
  std::vector<int> bad = {2};
  EXPECT_THROW(bic_loss(half, bad), ValidationError);
}

TEST(Encoders, BicGradientMatchesFiniteDifferences) {
  nn::ParamStore store;
  std::mt19937_64 rng(9);
  BicHead head(store, 32, rng);
  Tensor v(Mat::Random(1, 32), true), t(Mat::Random(1, 32), true);
  auto r = gradcheck::check("bic", {v, t}, [&] {
    std::vector<Tensor> p = {head(v, t)};
    std::vector<int> y = {1};
    return bic_loss(p, y);
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}
