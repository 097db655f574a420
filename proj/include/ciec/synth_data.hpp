#pragma once

// Synthetic image-text forgery pairs: patch-level image observations, token
// sequences with stop/content/manipulated vocabulary strata, prior candidate
// boxes, coarse labels, and fine ground truth that only the metrics may read.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "ciec/box.hpp"

namespace ciec::data {

/// Number of ground-truth reads since process start. The weak-supervision
/// audit samples it around loss computation.
std::int64_t ground_truth_reads();

/// Wraps a ground-truth field so every read is counted.
template <typename T>
class Audited {
 public:
  Audited() = default;
  explicit Audited(T value) : value_(std::move(value)) {}

  const T& get() const;
  void set(T value) { value_ = std::move(value); }

  friend bool operator==(const Audited& a, const Audited& b) { return a.get() == b.get(); }

 private:
  T value_{};
};

namespace detail {
void count_ground_truth_read();
}

template <typename T>
const T& Audited<T>::get() const {
  detail::count_ground_truth_read();
  return value_;
}

struct ForgeryMix {
  double tt = 0.25;  // authentic image, authentic text
  double ft = 0.25;  // forged image, authentic text
  double tf = 0.25;  // authentic image, forged text
  double ff = 0.25;  // both forged

  friend bool operator==(const ForgeryMix&, const ForgeryMix&) = default;
};

struct DatasetManifest {
  int num_samples = 64;
  int grid_side = 8;
  int patch_dim = 16;
  int token_length = 16;
  int vocab_size = 64;
  int num_candidates = 5;
  ForgeryMix mix;
  double signal_strength = 3.0;  // mean shift of forged patches
  std::uint64_t seed = 7;

  /// Throws ConfigError on non-positive sizes or a mix not summing to 1.
  void validate() const;
  int num_patches() const { return grid_side * grid_side; }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Vocabulary strata: id 0 is padding, then stop words, content words, and
/// the manipulated stratum that only forged tokens are drawn from.
struct VocabLayout {
  int pad_id = 0;
  int stop_begin = 1, stop_end = 1;
  int content_begin = 1, content_end = 1;
  int manipulated_begin = 1, manipulated_end = 1;

  static VocabLayout for_size(int vocab_size);
  bool is_stop(int id) const { return id >= stop_begin && id < stop_end; }
  bool is_content(int id) const { return id >= content_begin && id < content_end; }
  bool is_manipulated(int id) const { return id >= manipulated_begin && id < manipulated_end; }
};

struct Sample {
  int grid_side = 0;
  int patch_dim = 0;
  std::vector<double> patches;      // (grid_side^2) x patch_dim, row-major
  std::vector<int> tokens;          // token_length ids, padded with pad id
  std::vector<char> content_mask;   // non-stop, non-padding
  std::vector<char> padding_mask;   // real (non-padding) tokens
  std::vector<Box> candidates;
  Audited<std::optional<Box>> gt_box;
  Audited<std::vector<int>> gt_tokens;  // sorted token positions
  int y_v = 0;
  int y_t = 0;
  int y_m = 0;

  int num_patches() const { return grid_side * grid_side; }
  int token_length() const { return static_cast<int>(tokens.size()); }

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

/// Deterministic in (manifest, seed); sample i depends only on the manifest
/// and i.
std::vector<Sample> generate_dataset(const DatasetManifest& manifest);

/// Prior boxes: for a forged image one box with IoU >= 0.5 against the
/// ground truth plus n-1 distractors with IoU < 0.2; for an authentic image
/// n distractors.
std::vector<Box> propose_candidates(const Sample& sample, int n, std::uint64_t seed);

/// Rounds to 9 significant decimal digits, the precision of the file format.
double quantize(double v);

/// Checks every Sample invariant; throws ValidationError naming the field.
void validate_sample(const Sample& s);

inline constexpr int kSchemaVersion = 1;

void write_dataset(std::ostream& out, const Dataset& dataset);
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace ciec::data
