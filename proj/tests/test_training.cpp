#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ciec/errors.hpp"
#include "ciec/training.hpp"

using namespace ciec;
using namespace ciec::train;

namespace {

std::vector<data::Sample> make_data(int n, std::uint64_t seed = 7) {
  data::DatasetManifest m;
  m.num_samples = n;
  m.seed = seed;
  return data::generate_dataset(m);
}

TrainConfig quick_config(int steps) {
  TrainConfig c;
  c.max_steps = steps;
  c.batch_size = 8;
  c.eval_every = 2;
  return c;
}

}  // namespace

TEST(Training, TotalLossExamples) {
  LossReport r;
  r.parts[kBic] = 0.5;
  r.parts[kAsc] = 0.25;
  EXPECT_DOUBLE_EQ(total_loss(r, LossWeights{}), 0.75);
  LossWeights w;
  w[kAsc] = 0.0;
  EXPECT_DOUBLE_EQ(total_loss(r, w), 0.5);
  r.parts[kSce] = std::nan("");
  try {
    total_loss(r, LossWeights{});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("L_Sce"), std::string::npos);
  }
}

TEST(Training, DefaultsAndFullScalePreset) {
  TrainConfig c;
  for (double w : c.weights.w) EXPECT_EQ(w, 1.0);
  EXPECT_EQ(c.weight_decay, 0.02);
  EXPECT_EQ(c.epochs, 5);
  EXPECT_EQ(c.batch_size, 16);
  const auto p = TrainConfig::full_scale();
  EXPECT_EQ(p.learning_rate, 1e-5);
  EXPECT_EQ(p.weight_decay, 0.02);
  EXPECT_EQ(p.epochs, 50);
  EXPECT_EQ(p.batch_size, 32);
  EXPECT_EQ(p.model.cfa.layers, 6);
}

TEST(Training, ConfigTextRoundTrip) {
  TrainConfig c;
  c.learning_rate = 3.5e-4;
  c.weights[kScc] = 0.25;
  c.ablation.image_aid = false;
  c.trps.k1 = 3;
  std::stringstream ss;
  write_config(ss, c);
  TrainConfig back = parse_config(ss);
  EXPECT_EQ(config_items(back), config_items(c));

  std::istringstream bad("learning_rate = fast\n");
  EXPECT_THROW(parse_config(bad), ConfigError);
  std::istringstream unknown("colour = blue\n");
  EXPECT_THROW(parse_config(unknown), ConfigError);
  std::istringstream junk("no equals sign\n");
  EXPECT_THROW(parse_config(junk), ParseError);
  std::istringstream comments("# header\n  steps = 12  # trailing\n\n");
  EXPECT_EQ(parse_config(comments).max_steps, 12);
}

TEST(Training, InvalidConfigRejected) {
  TrainConfig c;
  c.weights[kBsc] = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, ForwardShapesAndTrainGate) {
  auto data = make_data(8);
  TrainConfig cfg;
  CiecModel model(cfg);
  for (const auto& s : data) {
    auto w = weak_view(s);
    auto f = model.forward(w, Phase::kTrain);
    EXPECT_EQ(f.p_patch.rows(), 64);
    EXPECT_EQ(f.masks.rows(), 5);
    EXPECT_EQ(f.s_t.rows(), 16);
    EXPECT_EQ(f.gate, s.y_v == 1);
    if (s.y_v == 0) EXPECT_TRUE(f.mask_hat.value().isZero());
    for (int l = 0; l < 16; ++l) {
      if (!s.content_mask[l]) EXPECT_EQ(f.s_t.value()(l, 0), 0.0);
    }
  }
}

TEST(Training, WeakSupervisionAuditCountsNoGroundTruthReads) {
  auto data = make_data(24);
  TrainConfig cfg = quick_config(3);
  const auto before = data::ground_truth_reads();
  auto views = weak_views(data);
  CiecModel model(cfg);
  auto losses = compute_losses(model, views, cfg);
  losses.total.backward();
  train::train(cfg, std::span(data).first(16), std::span(data).last(8));
  EXPECT_EQ(data::ground_truth_reads(), before);
}

TEST(Training, ScramblingGroundTruthLeavesLossesUnchanged) {
  auto data = make_data(24);
  auto scrambled = data;
  for (auto& s : scrambled) {
    if (s.gt_box.get()) s.gt_box.set(Box{0.11, 0.87, 0.05, 0.05});
    s.gt_tokens.set(s.y_t ? std::vector<int>{0} : std::vector<int>{});
  }
  TrainConfig cfg = quick_config(4);
  auto a = train::train(cfg, data);
  auto b = train::train(cfg, scrambled);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].losses.parts, b.log[i].losses.parts);
}

TEST(Training, DeterministicGivenSeed) {
  auto data = make_data(40);
  TrainConfig cfg = quick_config(5);
  auto a = train::train(cfg, std::span(data).first(32), std::span(data).last(8));
  auto b = train::train(cfg, std::span(data).first(32), std::span(data).last(8));
  ASSERT_EQ(a.log.size(), 5u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].losses.parts, b.log[i].losses.parts);
    EXPECT_EQ(a.log[i].losses.total, b.log[i].losses.total);
  }
  std::ostringstream ca, cb;
  save_checkpoint(ca, a.final_checkpoint);
  save_checkpoint(cb, b.final_checkpoint);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(a.best_step, b.best_step);
}

TEST(Training, ZeroLearningRateLeavesParametersBitwise) {
  auto data = make_data(16);
  TrainConfig cfg = quick_config(2);
  cfg.learning_rate = 0.0;
  auto r = train::train(cfg, data);
  CiecModel fresh(cfg);
  const auto& entries = fresh.params().entries();
  ASSERT_EQ(entries.size(), r.final_checkpoint.params.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(r.final_checkpoint.params[i].first, entries[i].first);
    EXPECT_TRUE(r.final_checkpoint.params[i].second == entries[i].second.value()) << entries[i].first;
  }
}

TEST(Training, BicOnlyTrainingTouchesOnlyBackbone) {
  auto data = make_data(16);
  TrainConfig cfg = quick_config(3);
  cfg.weights.w.fill(0.0);
  cfg.weights[kBic] = 1.0;
  auto r = train::train(cfg, data);
  CiecModel fresh(cfg);
  int changed_backbone = 0;
  for (std::size_t i = 0; i < r.final_checkpoint.params.size(); ++i) {
    const auto& [name, value] = r.final_checkpoint.params[i];
    const bool changed = !(value == fresh.params().entries()[i].second.value());
    if (fresh.is_backbone_param(name)) {
      changed_backbone += changed;
    } else {
      EXPECT_FALSE(changed) << name;
    }
  }
  EXPECT_GT(changed_backbone, 0);
}

TEST(Training, ZeroWeightPartGetsNoGradient) {
  auto data = make_data(16);
  auto views = weak_views(data);
  TrainConfig cfg;
  cfg.weights[kTFine] = 0.0;
  cfg.weights[kAsc] = 0.0;
  cfg.weights[kTCoarse] = 0.0;
  cfg.weights[kScc] = 0.0;
  CiecModel model(cfg);
  auto losses = compute_losses(model, views, cfg);
  losses.total.backward();
  // The fine text head only feeds the zero-weighted L_t_Fine.
  EXPECT_FALSE(model.params().get("vctg.fine_head.weight").has_grad());
  EXPECT_TRUE(model.params().get("trps.alpha").has_grad());
}

TEST(Training, FiftyFullBatchStepsReduceLoss) {
  auto data = make_data(32, 11);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.max_steps = 50;
  auto views = weak_views(data);
  double before = 0;
  {
    CiecModel fresh(cfg);
    ag::NoGradGuard g;
    before = compute_losses(fresh, views, cfg).report.total;
  }
  auto r = train::train(cfg, data);
  CiecModel trained = load_model(r.final_checkpoint);
  ag::NoGradGuard g;
  const double after = compute_losses(trained, views, cfg).report.total;
  EXPECT_LE(after, 0.8 * before) << "before " << before << " after " << after;
}

TEST(Training, DivergenceAborts) {
  auto data = make_data(8);
  TrainConfig cfg = quick_config(2);
  cfg.divergence_limit = 1e-3;
  EXPECT_THROW(train::train(cfg, data), TrainingError);
  EXPECT_THROW(train::train(cfg, std::span<const data::Sample>{}), ValidationError);
}

TEST(Training, CheckpointRoundTrip) {
  auto data = make_data(8);
  TrainConfig cfg = quick_config(1);
  cfg.ablation.text_aid = false;
  auto r = train::train(cfg, data);
  std::stringstream ss;
  save_checkpoint(ss, r.final_checkpoint);
  Checkpoint back = load_checkpoint(ss);
  EXPECT_EQ(config_items(back.config), config_items(cfg));
  ASSERT_EQ(back.params.size(), r.final_checkpoint.params.size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    EXPECT_EQ(back.params[i].first, r.final_checkpoint.params[i].first);
    EXPECT_TRUE(back.params[i].second == r.final_checkpoint.params[i].second);
  }
  auto p1 = predict(r.final_checkpoint, data[0]);
  auto p2 = predict(back, data[0]);
  EXPECT_EQ(p1.y_m, p2.y_m);

  Checkpoint broken = back;
  broken.params[0].second = Mat::Zero(1, 1);
  EXPECT_THROW(load_model(broken), ConfigError);
  std::istringstream garbage("not a checkpoint\n");
  EXPECT_THROW(load_checkpoint(garbage), ParseError);
}

TEST(Training, PredictionGates) {
  auto data = make_data(48);
  TrainConfig cfg;
  CiecModel model(cfg);
  for (const auto& s : data) {
    auto p = predict(model, weak_view(s));
    EXPECT_EQ(p.box.has_value(), p.y_v > 0.5);
    if (p.y_t <= 0.5) EXPECT_TRUE(p.tokens.empty());
    for (int t : p.tokens) EXPECT_TRUE(s.content_mask[t]);
    const int content = static_cast<int>(std::count(s.content_mask.begin(), s.content_mask.end(), 1));
    EXPECT_LE(static_cast<int>(p.tokens.size()), vctg::k2_policy(content, cfg.vctg.k2_ratio));
    EXPECT_GE(p.best_candidate, 0);
    EXPECT_LT(p.best_candidate, 5);
  }
}

TEST(Training, SplitValidation) {
  auto data = make_data(20);
  auto [tr, val] = split_validation(data, 0.1);
  EXPECT_EQ(tr.size(), 18u);
  EXPECT_EQ(val.size(), 2u);
  EXPECT_EQ(&val[0], &data[18]);
}

TEST(Training, LogRowJson) {
  LogRow row;
  row.step = 3;
  row.losses.parts[kBic] = 0.5;
  row.losses.total = 0.5;
  std::ostringstream out;
  write_log_row(out, row);
  auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j["step"], 3);
  EXPECT_EQ(j["L_BIC"], 0.5);
  EXPECT_TRUE(j.contains("L_Scc"));
  EXPECT_EQ(j["total"], 0.5);
}
