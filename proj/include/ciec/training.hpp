#pragma once

// Full model assembly, loss aggregation, AdamW training loop, checkpoints,
// flat key-value configs, and the test-time prediction path.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ciec/autograd.hpp"
#include "ciec/encoders_cfa.hpp"
#include "ciec/metrics.hpp"
#include "ciec/nn.hpp"
#include "ciec/synth_data.hpp"
#include "ciec/trps.hpp"
#include "ciec/vctg.hpp"

namespace ciec::train {

using ag::Mat;
using ag::Tensor;

enum LossId : int { kBic, kVCoarse, kVFine, kBsc, kSce, kTCoarse, kTFine, kAsc, kScc, kNumLosses };

inline constexpr std::array<std::string_view, kNumLosses> kLossNames = {
    "L_BIC", "L_v_Coarse", "L_v_Fine", "L_Bsc", "L_Sce", "L_t_Coarse", "L_t_Fine", "L_Asc", "L_Scc"};

struct LossWeights {
  std::array<double, kNumLosses> w{1, 1, 1, 1, 1, 1, 1, 1, 1};

  double& operator[](LossId id) { return w[id]; }
  double operator[](LossId id) const { return w[id]; }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossReport {
  std::array<double, kNumLosses> parts{};
  double total = 0.0;

  double operator[](LossId id) const { return parts[id]; }
};

/// Weighted sum of the parts. Throws TrainingError naming the first
/// non-finite part.
double total_loss(const LossReport& parts, const LossWeights& weights);

struct ModelConfig {
  int grid_side = 8;
  int patch_dim = 16;
  int token_length = 16;
  int vocab_size = 64;
  model::CfaConfig cfa;

  int num_patches() const { return grid_side * grid_side; }
  void validate() const;
};

/// Branch switches used by the ablation studies.
struct Ablation {
  bool text_aid = true;   // explicit text-similarity branch of candidate scoring
  bool image_aid = true;  // visual-deviation branch of token scoring
};

struct TrainConfig {
  ModelConfig model;
  trps::TrpsHyper trps;
  vctg::VctgHyper vctg;
  LossWeights weights;
  Ablation ablation;
  double learning_rate = 1e-3;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 5;
  int batch_size = 16;
  int max_steps = 0;  // > 0 overrides epochs
  int eval_every = 50;
  double val_fraction = 0.1;
  double divergence_limit = 1e6;
  std::uint64_t seed = 7;

  void validate() const;
  /// Values used at full scale: lr 1e-5, 50 epochs, batch 32, 6 CFA layers.
  static TrainConfig full_scale();
};

/// Flat `key = value` text; '#' starts a comment. Unknown keys throw ConfigError.
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig parse_config(std::istream& in, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::vector<std::pair<std::string, std::string>> config_items(const TrainConfig& cfg);
void write_config(std::ostream& out, const TrainConfig& cfg);

/// The fields a loss is allowed to see. Built without touching ground truth.
struct WeakSample {
  Mat patches;  // N x patch_dim
  std::vector<int> tokens;
  std::vector<char> content_mask;
  std::vector<char> padding_mask;
  std::vector<Box> candidates;
  int y_v = 0;
  int y_t = 0;
  int y_m = 0;
};

WeakSample weak_view(const data::Sample& s);
std::vector<WeakSample> weak_views(std::span<const data::Sample> samples);

enum class Phase { kTrain, kEval };

struct SampleForward {
  model::FeatureBundle features;
  Tensor bic_prob;
  Tensor p_patch;        // N x 1
  Tensor y_v_coarse;
  Tensor masks;          // n x N, unfiltered
  Tensor mask_hat;       // masks gated by y_v (train) or y_v_coarse > 0.5 (eval)
  trps::CandidateScores candidates;
  bool gate = false;
  int open_best_idx = 0;  // candidate ranking with the mask gate forced open
  trps::ScopeGated gated;
  Tensor token_probs;    // L x 1
  Tensor y_t_coarse;
  Tensor s_it, s_raw, s_et, s_t;  // L x 1
  Tensor y_t_fine;
};

class CiecModel {
 public:
  CiecModel(const ModelConfig& cfg, const trps::TrpsHyper& trps, const vctg::VctgHyper& vctg,
            const Ablation& ablation, std::uint64_t seed);
  explicit CiecModel(const TrainConfig& cfg);

  SampleForward forward(const WeakSample& s, Phase phase) const;

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  const trps::TrpsHead& trps_head() const { return trps_head_; }
  const vctg::VctgHead& vctg_head() const { return vctg_head_; }
  const Mat& spatial_kernel() const { return spatial_kernel_; }
  const vctg::VctgHyper& vctg_hyper() const { return vctg_; }

  /// Names of parameters owned by the encoders, alignment stack and BIC head.
  bool is_backbone_param(std::string_view name) const;

 private:
  ModelConfig cfg_;
  trps::TrpsHyper trps_;
  vctg::VctgHyper vctg_;
  Ablation ablation_;
  nn::ParamStore store_;
  model::ImageEncoder image_;
  model::TextEncoder text_;
  model::CrossModalAlignment cfa_;
  model::BicHead bic_;
  trps::TrpsHead trps_head_;
  vctg::VctgHead vctg_head_;
  ag::Mat spatial_kernel_;
};

struct BatchLosses {
  std::array<Tensor, kNumLosses> parts;
  Tensor total;
  LossReport report;
  std::vector<SampleForward> forwards;
};

/// Every loss of the objective over one batch. Reads only WeakSample fields.
BatchLosses compute_losses(const CiecModel& model, std::span<const WeakSample> batch,
                           const TrainConfig& cfg);

struct LogRow {
  int step = 0;
  LossReport losses;
};

struct Checkpoint {
  TrainConfig config;
  std::vector<std::pair<std::string, Mat>> params;
};

Checkpoint make_checkpoint(const CiecModel& model, const TrainConfig& cfg);
/// Rebuilds the model; throws ConfigError on missing or mis-shaped tensors.
CiecModel load_model(const Checkpoint& ckpt);
void save_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  std::vector<LogRow> log;
  double best_val_loss = 0.0;
  int best_step = 0;
};

using StepCallback = std::function<void(const LogRow&)>;

/// AdamW over the batch-mean objective. Deterministic in (config, data).
/// Throws TrainingError when the total exceeds config.divergence_limit.
TrainResult train(const TrainConfig& cfg, std::span<const data::Sample> train_set,
                  std::span<const data::Sample> val_set = {}, const StepCallback& on_step = {});

/// Splits off the trailing val_fraction of samples for model selection.
std::pair<std::span<const data::Sample>, std::span<const data::Sample>> split_validation(
    std::span<const data::Sample> samples, double val_fraction);

void write_log_row(std::ostream& out, const LogRow& row);

struct Prediction {
  double y_m = 0.0;
  double y_v = 0.0;  // coarse image score
  std::optional<Box> box;
  int best_candidate = 0;  // argmax S_v with the mask gate forced open
  double y_t = 0.0;        // fine sentence score
  std::vector<int> tokens; // positions in the Top-K2 set O with S_t > 0.5
};

Prediction predict(const CiecModel& model, const WeakSample& sample);
Prediction predict(const Checkpoint& ckpt, const data::Sample& sample);

struct EvalResult {
  metrics::MetricsReport report;
  std::vector<Prediction> predictions;
  double box_selection_accuracy = 0.0;  // forged images only
  int forged_images = 0;
};

/// Runs predict over the samples and scores them against ground truth.
EvalResult evaluate(const CiecModel& model, std::span<const data::Sample> samples);

}  // namespace ciec::train
