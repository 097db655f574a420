#include <gtest/gtest.h>

#include <cmath>

#include <sstream>

#include "ciec/errors.hpp"
#include "ciec/synth_data.hpp"

using namespace ciec;
using namespace ciec::data;

namespace {

DatasetManifest small(int n, ForgeryMix mix = {}) {
  DatasetManifest m;
  m.num_samples = n;
  m.mix = mix;
  return m;
}

std::string serialize(const Dataset& d) {
  std::ostringstream out;
  write_dataset(out, d);
  return out.str();
}

}  // namespace

TEST(SynthData, PureAuthenticMixGivesZeroLabels) {
  auto samples = generate_dataset(small(4, {1.0, 0.0, 0.0, 0.0}));
  ASSERT_EQ(samples.size(), 4u);
  for (const auto& s : samples) {
    EXPECT_EQ(s.y_v, 0);
    EXPECT_EQ(s.y_t, 0);
    EXPECT_EQ(s.y_m, 0);
  }
}

TEST(SynthData, FullyForgedMixHasBothGroundTruths) {
  for (const auto& s : generate_dataset(small(16, {0.0, 0.0, 0.0, 1.0}))) {
    EXPECT_EQ(s.y_m, 1);
    EXPECT_TRUE(s.gt_box.get().has_value());
    EXPECT_FALSE(s.gt_tokens.get().empty());
  }
}

TEST(SynthData, SameSeedGivesIdenticalBytes) {
  auto m = small(24);
  EXPECT_EQ(serialize({m, generate_dataset(m)}), serialize({m, generate_dataset(m)}));
  auto other = m;
  other.seed = 8;
  EXPECT_NE(serialize({m, generate_dataset(m)}), serialize({other, generate_dataset(other)}));
}

TEST(SynthData, SampleDependsOnlyOnIndex) {
  auto a = generate_dataset(small(10));
  auto b = generate_dataset(small(20));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(SynthData, EverySampleSatisfiesInvariants) {
  auto m = small(400);
  const auto vocab = VocabLayout::for_size(m.vocab_size);
  for (const auto& s : generate_dataset(m)) {
    EXPECT_NO_THROW(validate_sample(s));
    EXPECT_EQ(s.y_m, s.y_v | s.y_t);
    EXPECT_EQ(static_cast<int>(s.candidates.size()), m.num_candidates);
    for (int t : s.gt_tokens.get()) {
      EXPECT_TRUE(s.content_mask[t]);
      EXPECT_TRUE(s.padding_mask[t]);
      EXPECT_TRUE(vocab.is_manipulated(s.tokens[t]));
    }
    const int content = static_cast<int>(std::count(s.content_mask.begin(), s.content_mask.end(), 1));
    const int expected = s.y_t ? std::max(1, static_cast<int>(std::ceil(0.15 * content))) : 0;
    EXPECT_EQ(static_cast<int>(s.gt_tokens.get().size()), expected);
    for (std::size_t l = 0; l < s.tokens.size(); ++l) {
      const bool forged = std::count(s.gt_tokens.get().begin(), s.gt_tokens.get().end(), static_cast<int>(l)) > 0;
      if (!forged) EXPECT_FALSE(vocab.is_manipulated(s.tokens[l]));
    }
    const auto& gt = s.gt_box.get();
    int hits = 0;
    for (const Box& c : s.candidates) {
      if (gt) hits += iou(c, *gt) >= 0.5;
    }
    EXPECT_EQ(hits, gt ? 1 : 0);
  }
}

TEST(SynthData, ForgedPatchesAreShifted) {
  // The mean patch vector inside forged boxes moves away from the authentic
  // mean; compare average norms of the per-patch mean over many samples.
  auto m = small(200, {0.0, 1.0, 0.0, 0.0});
  double inside = 0, outside = 0;
  int n_in = 0, n_out = 0;
  for (const auto& s : generate_dataset(m)) {
    const Box& b = *s.gt_box.get();
    for (int j = 0; j < s.num_patches(); ++j) {
      const double px = (j % s.grid_side + 0.5) / s.grid_side;
      const double py = (j / s.grid_side + 0.5) / s.grid_side;
      const bool in = std::abs(px - b.cx) < b.w / 2 && std::abs(py - b.cy) < b.h / 2;
      double sq = 0;
      for (int d = 0; d < s.patch_dim; ++d) sq += s.patches[j * s.patch_dim + d] * s.patches[j * s.patch_dim + d];
      (in ? inside : outside) += sq;
      (in ? n_in : n_out) += 1;
    }
  }
  EXPECT_GT(inside / n_in, outside / n_out + 2.0);
}

TEST(SynthData, ProposeCandidatesContract) {
  auto samples = generate_dataset(small(40));
  for (const auto& s : samples) {
    for (int n : {1, 5}) {
      auto c = propose_candidates(s, n, 123);
      ASSERT_EQ(static_cast<int>(c.size()), n);
      const auto& gt = s.gt_box.get();
      double best = 0;
      for (const Box& b : c) {
        EXPECT_TRUE(is_valid(b));
        if (gt) best = std::max(best, iou(b, *gt));
      }
      if (gt) {
        EXPECT_GE(best, 0.5);
      }
    }
  }
}

TEST(SynthData, RoundTripPreservesEveryField) {
  auto m = small(50);
  Dataset d{m, generate_dataset(m)};
  std::istringstream in(serialize(d));
  Dataset back = read_dataset(in);
  EXPECT_EQ(back.manifest, d.manifest);
  ASSERT_EQ(back.samples.size(), d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) EXPECT_EQ(back.samples[i], d.samples[i]);
  EXPECT_EQ(serialize(back), serialize(d));
}

TEST(SynthData, EmptyDatasetRoundTrips) {
  Dataset d{small(0), {}};
  const std::string text = serialize(d);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  std::istringstream in(text);
  EXPECT_TRUE(read_dataset(in).samples.empty());
}

TEST(SynthData, TruncatedFileNamesRecordIndex) {
  auto m = small(5);
  std::string text = serialize({m, generate_dataset(m)});
  // Drop the last two records.
  for (int k = 0; k < 2; ++k) text.erase(text.rfind('\n', text.size() - 2) + 1);
  std::istringstream in(text);
  try {
    read_dataset(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos) << e.what();
  }
}

TEST(SynthData, MalformedFieldNamesRecordAndField) {
  auto m = small(3);
  std::string text = serialize({m, generate_dataset(m)});
  const auto pos = text.find("\"y_t\":", text.find("\"index\":1"));
  text.replace(pos, 6, "\"y_t\":\"x\",\"zz\":");
  std::istringstream in(text);
  try {
    read_dataset(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("record 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("y_t"), std::string::npos) << msg;
  }
}

TEST(SynthData, InvalidManifestIsConfigError) {
  auto m = small(4);
  m.mix = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(generate_dataset(m), ConfigError);
  m = small(4);
  m.grid_side = 0;
  EXPECT_THROW(generate_dataset(m), ConfigError);
  m = small(-1);
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(SynthData, QuantizeKeepsNineDigits) {
  EXPECT_EQ(quantize(1.0 / 3.0), 0.333333333);
  EXPECT_EQ(quantize(quantize(2.718281828459045)), quantize(2.718281828459045));
}

TEST(SynthData, GroundTruthReadsAreCounted) {
  auto samples = generate_dataset(small(2));
  const auto before = ground_truth_reads();
  (void)samples[0].gt_box.get();
  (void)samples[1].gt_tokens.get();
  EXPECT_EQ(ground_truth_reads() - before, 2);
}
