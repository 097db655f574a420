#include "ciec/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ciec/errors.hpp"

namespace ciec::train {

namespace {

constexpr int kCheckpointVersion = 1;

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string weight_key(int id) { return "weight." + std::string(kLossNames[static_cast<std::size_t>(id)]); }

Tensor batch_mean(const std::vector<Tensor>& terms) {
  if (terms.empty()) return ag::scalar(0.0);
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return total * (1.0 / static_cast<double>(terms.size()));
}

class AdamW {
 public:
  AdamW(const nn::ParamStore& store, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& [name, t] : store.entries()) {
      m_.push_back(Mat::Zero(t.rows(), t.cols()));
      v_.push_back(Mat::Zero(t.rows(), t.cols()));
    }
  }

  // Parameters that received no gradient this step are left untouched.
  void step(nn::ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const double lr = cfg_.learning_rate;
    std::size_t i = 0;
    for (const auto& entry : store.entries()) {
      Tensor p = entry.second;
      if (p.has_grad()) {
        const Mat& g = p.grad();
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        Mat update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.adam_eps);
        Mat& w = p.mutable_value();
        w -= lr * cfg_.weight_decay * w;
        w -= lr * update;
      }
      ++i;
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Mat> m_, v_;
  int t_ = 0;
};

}  // namespace

double total_loss(const LossReport& parts, const LossWeights& weights) {
  double total = 0.0;
  for (int i = 0; i < kNumLosses; ++i) {
    if (!std::isfinite(parts.parts[static_cast<std::size_t>(i)])) {
      throw TrainingError("non-finite loss part: " + std::string(kLossNames[static_cast<std::size_t>(i)]));
    }
    if (weights.w[static_cast<std::size_t>(i)] != 0.0) {
      total += weights.w[static_cast<std::size_t>(i)] * parts.parts[static_cast<std::size_t>(i)];
    }
  }
  return total;
}

void ModelConfig::validate() const {
  if (grid_side <= 0 || patch_dim <= 0 || token_length <= 0 || vocab_size <= 0) {
    throw ConfigError("model: dimensions must be positive");
  }
  cfa.validate();
}

void TrainConfig::validate() const {
  model.validate();
  trps.validate(model.num_patches());
  vctg.validate();
  if (!(learning_rate >= 0) || !(weight_decay >= 0)) throw ConfigError("train: rates must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
    throw ConfigError("train: invalid AdamW moments");
  }
  for (double w : weights.w) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("train: loss weights must be finite and >= 0");
  }
  if (epochs < 0 || batch_size < 1 || max_steps < 0 || eval_every < 1) {
    throw ConfigError("train: epochs/batch_size/steps/eval_every out of range");
  }
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("train: val_fraction must be in [0,1)");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.learning_rate = 1e-5;
  c.weight_decay = 0.02;
  c.epochs = 50;
  c.batch_size = 32;
  c.model.cfa.layers = 6;
  return c;
}

void apply_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  auto as_int = [&] { return static_cast<int>(parse_int(key, v)); };
  auto as_double = [&] { return parse_double(key, v); };
  if (key == "learning_rate") c.learning_rate = as_double();
  else if (key == "weight_decay") c.weight_decay = as_double();
  else if (key == "beta1") c.beta1 = as_double();
  else if (key == "beta2") c.beta2 = as_double();
  else if (key == "adam_eps") c.adam_eps = as_double();
  else if (key == "epochs") c.epochs = as_int();
  else if (key == "batch_size") c.batch_size = as_int();
  else if (key == "steps") c.max_steps = as_int();
  else if (key == "eval_every") c.eval_every = as_int();
  else if (key == "val_fraction") c.val_fraction = as_double();
  else if (key == "divergence_limit") c.divergence_limit = as_double();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "grid_side") c.model.grid_side = as_int();
  else if (key == "patch_dim") c.model.patch_dim = as_int();
  else if (key == "token_length") c.model.token_length = as_int();
  else if (key == "vocab_size") c.model.vocab_size = as_int();
  else if (key == "cfa_layers") c.model.cfa.layers = as_int();
  else if (key == "embed_dim") c.model.cfa.embed_dim = as_int();
  else if (key == "heads") c.model.cfa.heads = as_int();
  else if (key == "ffn_ratio") c.model.cfa.ffn_ratio = as_int();
  else if (key == "tau1") c.trps.tau1 = as_double();
  else if (key == "tau2") c.trps.tau2 = as_double();
  else if (key == "eps") c.trps.eps = as_double();
  else if (key == "delta1") c.trps.delta1 = as_double();
  else if (key == "k_coarse") c.trps.k_coarse = as_int();
  else if (key == "k1") c.trps.k1 = as_int();
  else if (key == "lambda") c.vctg.lambda = as_double();
  else if (key == "delta2") c.vctg.delta2 = as_double();
  else if (key == "k_coarse_text") c.vctg.k_coarse = as_int();
  else if (key == "k2_ratio") c.vctg.k2_ratio = as_double();
  else if (key == "z_floor") c.vctg.z_floor = as_double();
  else if (key == "text_aid") c.ablation.text_aid = parse_bool(key, v);
  else if (key == "image_aid") c.ablation.image_aid = parse_bool(key, v);
  else {
    for (int i = 0; i < kNumLosses; ++i) {
      if (key == weight_key(i)) {
        c.weights.w[static_cast<std::size_t>(i)] = as_double();
        return;
      }
    }
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

TrainConfig parse_config(std::istream& in, TrainConfig base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  return parse_config(in, std::move(base));
}

std::vector<std::pair<std::string, std::string>> config_items(const TrainConfig& c) {
  std::vector<std::pair<std::string, std::string>> out = {
      {"learning_rate", fmt_double(c.learning_rate)},
      {"weight_decay", fmt_double(c.weight_decay)},
      {"beta1", fmt_double(c.beta1)},
      {"beta2", fmt_double(c.beta2)},
      {"adam_eps", fmt_double(c.adam_eps)},
      {"epochs", std::to_string(c.epochs)},
      {"batch_size", std::to_string(c.batch_size)},
      {"steps", std::to_string(c.max_steps)},
      {"eval_every", std::to_string(c.eval_every)},
      {"val_fraction", fmt_double(c.val_fraction)},
      {"divergence_limit", fmt_double(c.divergence_limit)},
      {"seed", std::to_string(c.seed)},
      {"grid_side", std::to_string(c.model.grid_side)},
      {"patch_dim", std::to_string(c.model.patch_dim)},
      {"token_length", std::to_string(c.model.token_length)},
      {"vocab_size", std::to_string(c.model.vocab_size)},
      {"cfa_layers", std::to_string(c.model.cfa.layers)},
      {"embed_dim", std::to_string(c.model.cfa.embed_dim)},
      {"heads", std::to_string(c.model.cfa.heads)},
      {"ffn_ratio", std::to_string(c.model.cfa.ffn_ratio)},
      {"tau1", fmt_double(c.trps.tau1)},
      {"tau2", fmt_double(c.trps.tau2)},
      {"eps", fmt_double(c.trps.eps)},
      {"delta1", fmt_double(c.trps.delta1)},
      {"k_coarse", std::to_string(c.trps.k_coarse)},
      {"k1", std::to_string(c.trps.k1)},
      {"lambda", fmt_double(c.vctg.lambda)},
      {"delta2", fmt_double(c.vctg.delta2)},
      {"k_coarse_text", std::to_string(c.vctg.k_coarse)},
      {"k2_ratio", fmt_double(c.vctg.k2_ratio)},
      {"z_floor", fmt_double(c.vctg.z_floor)},
      {"text_aid", c.ablation.text_aid ? "true" : "false"},
      {"image_aid", c.ablation.image_aid ? "true" : "false"},
  };
  for (int i = 0; i < kNumLosses; ++i) out.emplace_back(weight_key(i), fmt_double(c.weights.w[static_cast<std::size_t>(i)]));
  return out;
}

void write_config(std::ostream& out, const TrainConfig& cfg) {
  for (const auto& [k, v] : config_items(cfg)) out << k << " = " << v << '\n';
}

WeakSample weak_view(const data::Sample& s) {
  WeakSample w;
  w.patches = Eigen::Map<const Mat>(s.patches.data(), s.num_patches(), s.patch_dim);
  w.tokens = s.tokens;
  w.content_mask = s.content_mask;
  w.padding_mask = s.padding_mask;
  w.candidates = s.candidates;
  w.y_v = s.y_v;
  w.y_t = s.y_t;
  w.y_m = s.y_m;
  return w;
}

std::vector<WeakSample> weak_views(std::span<const data::Sample> samples) {
  std::vector<WeakSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(weak_view(s));
  return out;
}

CiecModel::CiecModel(const ModelConfig& cfg, const trps::TrpsHyper& trps, const vctg::VctgHyper& vctg,
                     const Ablation& ablation, std::uint64_t seed)
    : cfg_(cfg), trps_(trps), vctg_(vctg), ablation_(ablation) {
  cfg_.validate();
  trps_.validate(cfg_.num_patches());
  vctg_.validate();
  std::mt19937_64 rng(seed);
  image_ = model::ImageEncoder(store_, cfg_.num_patches(), cfg_.patch_dim, cfg_.cfa, rng);
  text_ = model::TextEncoder(store_, cfg_.token_length, cfg_.vocab_size, cfg_.cfa, rng);
  cfa_ = model::CrossModalAlignment(store_, cfg_.cfa, rng);
  bic_ = model::BicHead(store_, cfg_.cfa.embed_dim, rng);
  trps_head_ = trps::TrpsHead(store_, cfg_.cfa.embed_dim, rng);
  vctg_head_ = vctg::VctgHead(store_, cfg_.cfa.embed_dim, rng);
  spatial_kernel_ = trps::spatial_kernel(cfg_.grid_side, cfg_.grid_side / 4.0);
}

CiecModel::CiecModel(const TrainConfig& cfg)
    : CiecModel(cfg.model, cfg.trps, cfg.vctg, cfg.ablation, cfg.seed) {}

bool CiecModel::is_backbone_param(std::string_view name) const {
  for (std::string_view prefix : {"image.", "text.", "cfa.", "bic."}) {
    if (name.substr(0, prefix.size()) == prefix) return true;
  }
  return false;
}

SampleForward CiecModel::forward(const WeakSample& s, Phase phase) const {
  if (static_cast<int>(s.tokens.size()) != cfg_.token_length) {
    throw ConfigError("sample token length does not match model config");
  }
  SampleForward f;
  model::Encoded img = image_(s.patches);
  model::Encoded txt = text_(s.tokens, s.padding_mask);
  std::vector<char> text_valid(s.padding_mask.size() + 1, 1);
  std::copy(s.padding_mask.begin(), s.padding_mask.end(), text_valid.begin() + 1);
  auto [v_hat, t_hat] = cfa_(model::with_cls(img), model::with_cls(txt), text_valid);

  const int N = cfg_.num_patches();
  const int L = cfg_.token_length;
  f.features = {img.cls, img.seq, txt.cls, txt.seq,
                ag::slice_rows(v_hat, 0, 1), ag::slice_rows(v_hat, 1, N),
                ag::slice_rows(t_hat, 0, 1), ag::slice_rows(t_hat, 1, L)};
  const auto& F = f.features;
  f.bic_prob = bic_(F.v_cls_hat, F.t_cls_hat);

  // Image branch.
  f.p_patch = trps_head_.patch_probs(F.v_pat_hat);
  f.y_v_coarse = trps::topk_mean(f.p_patch, trps_.k_coarse);
  f.gate = phase == Phase::kTrain ? s.y_v == 1 : f.y_v_coarse.item() > 0.5;
  f.masks = trps::soft_mask(s.candidates, cfg_.grid_side, trps_.tau1);
  f.mask_hat = f.gate ? f.masks : f.masks * 0.0;
  Tensor sim = trps_head_.explicit_similarity(F.v_pat, F.t_cls);
  Tensor alpha = ablation_.text_aid ? trps_head_.alpha : ag::scalar(0.0);
  f.candidates = trps::dual_branch_scores(f.p_patch, sim, f.mask_hat, alpha);
  f.open_best_idx = f.gate ? f.candidates.best_idx
                           : trps::dual_branch_scores(f.p_patch, sim, f.masks, alpha).best_idx;
  f.gated = trps::scope_gated_aggregate(f.candidates.s_v, f.p_patch, f.gate, trps_.tau2);

  // Text branch.
  f.token_probs = vctg_head_.token_probs(F.t_tok_hat);
  f.y_t_coarse = vctg::coarse_text(f.token_probs, s.content_mask, vctg_.k_coarse, std::nullopt).y_coarse;
  f.s_it = vctg_head_.intrinsic_scores(F.t_tok_hat, s.padding_mask, s.content_mask);
  f.s_raw = vctg_head_.raw_similarity(F.t_tok, F.v_pat);
  f.s_et = vctg::extrinsic_scores(f.s_raw, s.content_mask, vctg_head_.eta, vctg_head_.beta, vctg_.z_floor);
  Tensor w_et = ablation_.image_aid ? vctg_head_.w_et : ag::scalar(0.0);
  f.s_t = vctg::fuse_scores(f.s_it, f.s_et, vctg_head_.w_it, w_et);
  f.y_t_fine = vctg_head_.fine_prob(f.s_t, F.t_tok_hat);
  return f;
}

BatchLosses compute_losses(const CiecModel& model, std::span<const WeakSample> batch,
                           const TrainConfig& cfg) {
  if (batch.empty()) throw ValidationError("compute_losses: empty batch");
  BatchLosses out;
  out.forwards.reserve(batch.size());
  for (const auto& s : batch) out.forwards.push_back(model.forward(s, Phase::kTrain));

  std::vector<Tensor> bic_probs, v_coarse, v_fine, bsc, sce, t_coarse, t_fine, s_t, s_raw;
  std::vector<int> y_m, y_v, y_t;
  std::vector<std::vector<char>> content, padding;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const WeakSample& s = batch[b];
    const SampleForward& f = out.forwards[b];
    bic_probs.push_back(f.bic_prob);
    y_m.push_back(s.y_m);
    y_v.push_back(s.y_v);
    y_t.push_back(s.y_t);
    v_coarse.push_back(ag::binary_cross_entropy(f.y_v_coarse, s.y_v));
    v_fine.push_back(ag::binary_cross_entropy(f.gated.y_fine, s.y_v));
    if (s.y_v == 1) {
      auto bg = trps::background_indicator(f.candidates.m_star.value(), cfg.trps.eps);
      bsc.push_back(trps::background_silencing_loss(f.p_patch, bg));
      auto contrast = trps::spatial_contrast_loss(f.features.v_pat_hat, bg,
                                                  model.spatial_kernel(),
                                                  cfg.trps.k1, cfg.trps.delta1);
      if (contrast) sce.push_back(*contrast);
    }
    t_coarse.push_back(ag::binary_cross_entropy(f.y_t_coarse, s.y_t));
    t_fine.push_back(ag::binary_cross_entropy(f.y_t_fine, s.y_t));
    s_t.push_back(f.s_t);
    s_raw.push_back(f.s_raw);
    content.push_back(s.content_mask);
    padding.push_back(s.padding_mask);
  }

  out.parts[kBic] = model::bic_loss(bic_probs, y_m);
  out.parts[kVCoarse] = batch_mean(v_coarse);
  out.parts[kVFine] = batch_mean(v_fine);
  out.parts[kBsc] = batch_mean(bsc);
  out.parts[kSce] = batch_mean(sce);
  out.parts[kTCoarse] = batch_mean(t_coarse);
  out.parts[kTFine] = batch_mean(t_fine);
  out.parts[kAsc] = vctg::asymmetric_sparse_loss(s_t, y_t, content, cfg.vctg.lambda, cfg.vctg.k2_ratio).total;
  out.parts[kScc] = vctg::semantic_consistency_loss(s_raw, y_v, y_t, padding, cfg.vctg.delta2);

  for (int i = 0; i < kNumLosses; ++i) out.report.parts[static_cast<std::size_t>(i)] = out.parts[static_cast<std::size_t>(i)].item();
  out.report.total = total_loss(out.report, cfg.weights);

  Tensor total;
  for (int i = 0; i < kNumLosses; ++i) {
    const double w = cfg.weights.w[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    Tensor term = out.parts[static_cast<std::size_t>(i)] * w;
    total = total.defined() ? total + term : term;
  }
  out.total = total.defined() ? total : ag::scalar(0.0);
  return out;
}

Checkpoint make_checkpoint(const CiecModel& model, const TrainConfig& cfg) {
  Checkpoint c;
  c.config = cfg;
  for (const auto& [name, t] : model.params().entries()) c.params.emplace_back(name, t.value());
  return c;
}

CiecModel load_model(const Checkpoint& ckpt) {
  CiecModel model(ckpt.config);
  auto& store = model.params();
  if (ckpt.params.size() != store.entries().size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                      std::to_string(store.entries().size()));
  }
  for (const auto& [name, value] : ckpt.params) {
    Tensor t = store.get(name);
    if (t.rows() != value.rows() || t.cols() != value.cols()) {
      throw ConfigError("checkpoint tensor '" + name + "' has wrong shape");
    }
    t.mutable_value() = value;
  }
  return model;
}

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out << "ciec-checkpoint " << kCheckpointVersion << '\n';
  auto items = config_items(ckpt.config);
  out << "config " << items.size() << '\n';
  for (const auto& [k, v] : items) out << k << " = " << v << '\n';
  out << "params " << ckpt.params.size() << '\n';
  for (const auto& [name, m] : ckpt.params) {
    out << "param " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (ag::Index i = 0; i < m.size(); ++i) {
      if (i) out << ' ';
      out << fmt_double(m.data()[i]);
    }
    out << '\n';
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  save_checkpoint(out, ckpt);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(std::istream& in) {
  std::string line, tag;
  int version = 0;
  if (!std::getline(in, line)) throw ParseError("checkpoint: empty input");
  std::istringstream(line) >> tag >> version;
  if (tag != "ciec-checkpoint" || version != kCheckpointVersion) throw ParseError("checkpoint: bad header");
  std::size_t n = 0;
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing config section");
  std::istringstream(line) >> tag >> n;
  if (tag != "config") throw ParseError("checkpoint: missing config section");
  std::stringstream cfg_text;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ParseError("checkpoint: truncated config");
    cfg_text << line << '\n';
  }
  Checkpoint c;
  c.config = parse_config(cfg_text);
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing params section");
  std::istringstream(line) >> tag >> n;
  if (tag != "params") throw ParseError("checkpoint: missing params section");
  for (std::size_t i = 0; i < n; ++i) {
    std::string name;
    ag::Index rows = 0, cols = 0;
    if (!std::getline(in, line)) throw ParseError("checkpoint: truncated at tensor " + std::to_string(i));
    std::istringstream(line) >> tag >> name >> rows >> cols;
    if (tag != "param" || rows < 0 || cols < 0) throw ParseError("checkpoint: bad tensor header " + std::to_string(i));
    if (!std::getline(in, line)) throw ParseError("checkpoint: missing values for " + name);
    Mat m(rows, cols);
    const char* p = line.c_str();
    for (ag::Index k = 0; k < m.size(); ++k) {
      char* end = nullptr;
      m.data()[k] = std::strtod(p, &end);
      if (end == p) throw ParseError("checkpoint: too few values for " + name);
      p = end;
    }
    c.params.emplace_back(name, std::move(m));
  }
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return load_checkpoint(in);
}

std::pair<std::span<const data::Sample>, std::span<const data::Sample>> split_validation(
    std::span<const data::Sample> samples, double val_fraction) {
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(samples.size())));
  return {samples.first(samples.size() - n_val), samples.last(n_val)};
}

void write_log_row(std::ostream& out, const LogRow& row) {
  nlohmann::ordered_json j;
  j["step"] = row.step;
  for (int i = 0; i < kNumLosses; ++i) {
    j[std::string(kLossNames[static_cast<std::size_t>(i)])] = row.losses.parts[static_cast<std::size_t>(i)];
  }
  j["total"] = row.losses.total;
  out << j.dump() << '\n';
}

TrainResult train(const TrainConfig& cfg, std::span<const data::Sample> train_set,
                  std::span<const data::Sample> val_set, const StepCallback& on_step) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("train: dataset is empty");
  CiecModel model(cfg);
  const auto train_views = weak_views(train_set);
  const auto val_views = weak_views(val_set);
  AdamW opt(model.params(), cfg);
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

  const auto n = train_views.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const int total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * static_cast<int>(steps_per_epoch);

  auto validation_loss = [&]() {
    ag::NoGradGuard no_grad;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < val_views.size(); i += batch) {
      auto chunk = std::span(val_views).subspan(i, std::min(batch, val_views.size() - i));
      sum += compute_losses(model, chunk, cfg).report.total * static_cast<double>(chunk.size());
      count += chunk.size();
    }
    return sum / static_cast<double>(count);
  };

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Mat> best_snapshot = model.params().snapshot();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  std::vector<WeakSample> current;
  for (int step = 1; step <= total_steps; ++step) {
    current.clear();
    while (current.size() < batch && current.size() < n) {
      if (cursor >= n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      current.push_back(train_views[order[cursor++]]);
      if (cursor >= n) break;  // batches do not straddle epochs
    }
    model.params().zero_grad();
    BatchLosses losses = compute_losses(model, current, cfg);
    if (!(losses.report.total <= cfg.divergence_limit)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": total loss " +
                          fmt_double(losses.report.total));
    }
    losses.total.backward();
    opt.step(model.params());
    LogRow row{step, losses.report};
    result.log.push_back(row);
    if (on_step) on_step(row);

    if (!val_views.empty() && (step % cfg.eval_every == 0 || step == total_steps)) {
      const double v = validation_loss();
      if (v < result.best_val_loss) {
        result.best_val_loss = v;
        result.best_step = step;
        best_snapshot = model.params().snapshot();
      }
    }
  }
  result.final_checkpoint = make_checkpoint(model, cfg);
  if (val_views.empty()) {
    result.best_checkpoint = result.final_checkpoint;
    result.best_step = total_steps;
    result.best_val_loss = 0.0;
  } else {
    model.params().restore(best_snapshot);
    result.best_checkpoint = make_checkpoint(model, cfg);
  }
  return result;
}

Prediction predict(const CiecModel& model, const WeakSample& sample) {
  ag::NoGradGuard no_grad;
  SampleForward f = model.forward(sample, Phase::kEval);
  Prediction p;
  p.y_m = f.bic_prob.item();
  p.y_v = f.y_v_coarse.item();
  p.best_candidate = f.open_best_idx;
  if (p.y_v > 0.5) p.box = sample.candidates[static_cast<std::size_t>(p.best_candidate)];
  p.y_t = f.y_t_fine.item();
  if (p.y_t > 0.5) {
    // Only O is trained towards forged in forged sentences; the rest carry no token-level signal.
    for (int l : vctg::sparse_set(f.s_t.value(), sample.content_mask, model.vctg_hyper().k2_ratio)) {
      if (f.s_t.value()(l, 0) > 0.5) p.tokens.push_back(l);
    }
  }
  return p;
}

Prediction predict(const Checkpoint& ckpt, const data::Sample& sample) {
  CiecModel model = load_model(ckpt);
  return predict(model, weak_view(sample));
}

EvalResult evaluate(const CiecModel& model, std::span<const data::Sample> samples) {
  EvalResult r;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::optional<Box>> pred_boxes, gt_boxes, pred_fake, gt_fake;
  std::vector<std::vector<int>> pred_tokens, gt_tokens;
  int correct_selection = 0;
  for (const auto& s : samples) {
    Prediction p = predict(model, weak_view(s));
    scores.push_back(p.y_m);
    labels.push_back(s.y_m);
    const auto& gt_box = s.gt_box.get();
    pred_boxes.push_back(p.box);
    gt_boxes.push_back(gt_box);
    if (s.y_v == 1) {
      pred_fake.push_back(p.box);
      gt_fake.push_back(gt_box);
      ++r.forged_images;
      if (gt_box && iou(s.candidates[static_cast<std::size_t>(p.best_candidate)], *gt_box) >= 0.5) {
        ++correct_selection;
      }
    }
    pred_tokens.push_back(p.tokens);
    gt_tokens.push_back(s.gt_tokens.get());
    r.predictions.push_back(std::move(p));
  }
  r.report.binary = metrics::binary_suite(scores, labels);
  r.report.grounding_all = metrics::grounding_suite(pred_boxes, gt_boxes);
  r.report.grounding_fake = metrics::grounding_suite(pred_fake, gt_fake);
  r.report.text = metrics::token_prf(pred_tokens, gt_tokens);
  r.report.num_samples = static_cast<int>(samples.size());
  r.report.num_fake_images = r.forged_images;
  r.report.num_fake_texts = static_cast<int>(std::count_if(samples.begin(), samples.end(),
                                                           [](const data::Sample& s) { return s.y_t == 1; }));
  r.box_selection_accuracy = r.forged_images ? static_cast<double>(correct_selection) / r.forged_images : 0.0;
  return r;
}

}  // namespace ciec::train
