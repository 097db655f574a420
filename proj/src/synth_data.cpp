#include "ciec/synth_data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "ciec/errors.hpp"

namespace ciec::data {

namespace {

std::atomic<std::int64_t> g_gt_reads{0};

constexpr double kStopProbability = 0.3;
constexpr double kManipulatedFraction = 0.15;
constexpr double kObjectScale = 3.0;
constexpr double kMinGtSide = 0.25, kMaxGtSide = 0.45;
constexpr double kMinDistractorSide = 0.2, kMaxDistractorSide = 0.45;
constexpr double kDistractorIouLimit = 0.2;
constexpr double kTrueCandidateIou = 0.5;

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

std::vector<double> unit_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (double& x : v) {
    x = n(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Shared per-dataset constants: one concept vector per vocabulary id and the
// direction forged patches are shifted along.
struct World {
  std::vector<std::vector<double>> concepts;
  std::vector<double> forgery_direction;
};

World make_world(const DatasetManifest& m) {
  auto rng = make_rng(m.seed, 0, 0xC0FFEE);
  World w;
  w.forgery_direction = unit_vector(rng, m.patch_dim);
  w.concepts.reserve(static_cast<std::size_t>(m.vocab_size));
  for (int i = 0; i < m.vocab_size; ++i) w.concepts.push_back(unit_vector(rng, m.patch_dim));
  return w;
}

Box random_box(std::mt19937_64& rng, double min_side, double max_side) {
  std::uniform_real_distribution<double> side(min_side, max_side);
  Box b;
  b.w = quantize(side(rng));
  b.h = quantize(side(rng));
  std::uniform_real_distribution<double> ux(b.w / 2, 1.0 - b.w / 2);
  std::uniform_real_distribution<double> uy(b.h / 2, 1.0 - b.h / 2);
  b.cx = quantize(ux(rng));
  b.cy = quantize(uy(rng));
  return b;
}

Box jitter_box(std::mt19937_64& rng, const Box& gt) {
  std::uniform_real_distribution<double> shift(-0.15, 0.15);
  std::uniform_real_distribution<double> scale(0.85, 1.15);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Box b;
    b.w = quantize(std::clamp(gt.w * scale(rng), 0.05, 1.0));
    b.h = quantize(std::clamp(gt.h * scale(rng), 0.05, 1.0));
    b.cx = quantize(std::clamp(gt.cx + shift(rng) * gt.w, 0.0, 1.0));
    b.cy = quantize(std::clamp(gt.cy + shift(rng) * gt.h, 0.0, 1.0));
    if (is_valid(b) && iou(b, gt) >= kTrueCandidateIou) return b;
  }
  return gt;
}

bool patch_inside(const Box& b, int grid, int index) {
  const double px = (index % grid + 0.5) / grid;
  const double py = (index / grid + 0.5) / grid;
  return std::abs(px - b.cx) <= b.w / 2 && std::abs(py - b.cy) <= b.h / 2;
}

nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["num_samples"] = m.num_samples;
  j["grid_side"] = m.grid_side;
  j["patch_dim"] = m.patch_dim;
  j["token_length"] = m.token_length;
  j["vocab_size"] = m.vocab_size;
  j["num_candidates"] = m.num_candidates;
  j["mix"] = {{"TT", m.mix.tt}, {"FT", m.mix.ft}, {"TF", m.mix.tf}, {"FF", m.mix.ff}};
  j["signal_strength"] = m.signal_strength;
  j["seed"] = m.seed;
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.num_samples = j.at("num_samples").get<int>();
  m.grid_side = j.at("grid_side").get<int>();
  m.patch_dim = j.at("patch_dim").get<int>();
  m.token_length = j.at("token_length").get<int>();
  m.vocab_size = j.at("vocab_size").get<int>();
  m.num_candidates = j.at("num_candidates").get<int>();
  const auto& mix = j.at("mix");
  m.mix = {mix.at("TT").get<double>(), mix.at("FT").get<double>(), mix.at("TF").get<double>(),
           mix.at("FF").get<double>()};
  m.signal_strength = j.at("signal_strength").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

nlohmann::ordered_json box_to_json(const Box& b) { return {b.cx, b.cy, b.w, b.h}; }

Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must have 4 numbers");
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

std::vector<char> mask_from_json(const nlohmann::json& j) {
  std::vector<char> out;
  for (const auto& v : j) out.push_back(static_cast<char>(v.get<int>() != 0));
  return out;
}

std::vector<int> mask_to_ints(const std::vector<char>& m) {
  return {m.begin(), m.end()};
}

}  // namespace

namespace detail {
void count_ground_truth_read() { g_gt_reads.fetch_add(1, std::memory_order_relaxed); }
}  // namespace detail

std::int64_t ground_truth_reads() { return g_gt_reads.load(std::memory_order_relaxed); }

double quantize(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

void DatasetManifest::validate() const {
  if (num_samples < 0) throw ConfigError("manifest: num_samples must be non-negative");
  if (grid_side <= 0 || patch_dim <= 0 || token_length <= 0 || vocab_size <= 0 ||
      num_candidates <= 0) {
    throw ConfigError("manifest: all dimensions must be positive");
  }
  if (token_length < 3) throw ConfigError("manifest: token_length must be at least 3");
  if (mix.tt < 0 || mix.ft < 0 || mix.tf < 0 || mix.ff < 0) {
    throw ConfigError("manifest: mix proportions must be non-negative");
  }
  if (std::abs(mix.tt + mix.ft + mix.tf + mix.ff - 1.0) > 1e-9) {
    throw ConfigError("manifest: mix proportions must sum to 1");
  }
  if (!(signal_strength >= 0) || !std::isfinite(signal_strength)) {
    throw ConfigError("manifest: signal_strength must be finite and non-negative");
  }
  (void)VocabLayout::for_size(vocab_size);
}

VocabLayout VocabLayout::for_size(int vocab_size) {
  VocabLayout v;
  const int n_stop = std::max(1, vocab_size / 8);
  const int n_manip = std::max(1, vocab_size / 4);
  v.stop_begin = 1;
  v.stop_end = v.stop_begin + n_stop;
  v.content_begin = v.stop_end;
  v.manipulated_begin = vocab_size - n_manip;
  v.content_end = v.manipulated_begin;
  v.manipulated_end = vocab_size;
  if (v.content_end - v.content_begin < 2) {
    throw ConfigError("manifest: vocab_size too small for stop/content/manipulated strata");
  }
  return v;
}

std::vector<Box> propose_candidates(const Sample& sample, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("propose_candidates: n must be >= 1");
  auto rng = make_rng(seed, static_cast<std::uint64_t>(n), 0xB0C5);
  const std::optional<Box>& gt = sample.gt_box.get();
  std::vector<Box> boxes;
  boxes.reserve(static_cast<std::size_t>(n));
  const int distractors = gt ? n - 1 : n;
  for (int i = 0; i < distractors; ++i) {
    Box b = random_box(rng, kMinDistractorSide, kMaxDistractorSide);
    for (int attempt = 0; gt && iou(b, *gt) >= kDistractorIouLimit && attempt < 10000; ++attempt) {
      b = random_box(rng, kMinDistractorSide, kMaxDistractorSide);
    }
    boxes.push_back(b);
  }
  if (gt) {
    std::uniform_int_distribution<int> slot(0, n - 1);
    boxes.insert(boxes.begin() + slot(rng), jitter_box(rng, *gt));
  }
  return boxes;
}

std::vector<Sample> generate_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  const World world = make_world(manifest);
  const VocabLayout vocab = VocabLayout::for_size(manifest.vocab_size);
  const int N = manifest.num_patches();
  const int P = manifest.patch_dim;
  const int L = manifest.token_length;

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(manifest.num_samples));
  for (int idx = 0; idx < manifest.num_samples; ++idx) {
    auto rng = make_rng(manifest.seed, static_cast<std::uint64_t>(idx) + 1, 0x5A3B1E);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    const double r = u01(rng);
    const auto& mx = manifest.mix;
    int y_v = 0, y_t = 0;
    if (r < mx.tt) {
    } else if (r < mx.tt + mx.ft) {
      y_v = 1;
    } else if (r < mx.tt + mx.ft + mx.tf) {
      y_t = 1;
    } else {
      y_v = y_t = 1;
    }
    // Guard against rounding in the cumulative sum for degenerate mixes.
    if (mx.tt == 1.0) y_v = y_t = 0;

    Sample s;
    s.grid_side = manifest.grid_side;
    s.patch_dim = P;

    // Sentence: real length in [max(3, L/2), L], at least two content words.
    std::uniform_int_distribution<int> len_dist(std::min(L, std::max(3, L / 2)), L);
    const int real_len = len_dist(rng);
    std::uniform_int_distribution<int> stop_id(vocab.stop_begin, vocab.stop_end - 1);
    std::uniform_int_distribution<int> content_id(vocab.content_begin, vocab.content_end - 1);
    std::uniform_int_distribution<int> manip_id(vocab.manipulated_begin, vocab.manipulated_end - 1);
    s.tokens.assign(static_cast<std::size_t>(L), vocab.pad_id);
    for (int p = 0; p < real_len; ++p) {
      s.tokens[p] = u01(rng) < kStopProbability ? stop_id(rng) : content_id(rng);
    }
    auto count_content = [&] {
      int c = 0;
      for (int p = 0; p < real_len; ++p) c += vocab.is_content(s.tokens[p]);
      return c;
    };
    while (count_content() < 2) {
      std::uniform_int_distribution<int> pos(0, real_len - 1);
      int p = pos(rng);
      if (!vocab.is_content(s.tokens[p])) s.tokens[p] = content_id(rng);
    }

    // Image: Gaussian background, one object patch per content word.
    std::normal_distribution<double> noise(0.0, 1.0);
    s.patches.resize(static_cast<std::size_t>(N * P));
    for (double& v : s.patches) v = noise(rng);
    std::vector<int> free_patches(static_cast<std::size_t>(N));
    std::iota(free_patches.begin(), free_patches.end(), 0);
    std::shuffle(free_patches.begin(), free_patches.end(), rng);
    std::size_t next_free = 0;
    for (int p = 0; p < real_len; ++p) {
      if (!vocab.is_content(s.tokens[p])) continue;
      const int patch = free_patches[next_free++ % free_patches.size()];
      const auto& c = world.concepts[static_cast<std::size_t>(s.tokens[p])];
      for (int d = 0; d < P; ++d) s.patches[static_cast<std::size_t>(patch * P + d)] += kObjectScale * c[d];
    }

    // Text forgery: replace ceil(kManipulatedFraction * content) words, at least one, with
    // manipulated-stratum ids.
    std::vector<int> gt_tokens;
    if (y_t) {
      std::vector<int> content_pos;
      for (int p = 0; p < real_len; ++p) {
        if (vocab.is_content(s.tokens[p])) content_pos.push_back(p);
      }
      std::shuffle(content_pos.begin(), content_pos.end(), rng);
      const int k = std::max(1, static_cast<int>(std::ceil(kManipulatedFraction * static_cast<double>(content_pos.size()))));
      for (int i = 0; i < k; ++i) {
        s.tokens[content_pos[i]] = manip_id(rng);
        gt_tokens.push_back(content_pos[i]);
      }
      std::sort(gt_tokens.begin(), gt_tokens.end());
    }

    // Image forgery: shift every patch whose center lies inside the box.
    std::optional<Box> gt_box;
    if (y_v) {
      Box b = random_box(rng, kMinGtSide, kMaxGtSide);
      bool any = false;
      for (int j = 0; j < N; ++j) {
        if (!patch_inside(b, manifest.grid_side, j)) continue;
        any = true;
        for (int d = 0; d < P; ++d) {
          s.patches[static_cast<std::size_t>(j * P + d)] += manifest.signal_strength * world.forgery_direction[d];
        }
      }
      if (!any) {
        const int gx = std::min(manifest.grid_side - 1, static_cast<int>(b.cx * manifest.grid_side));
        const int gy = std::min(manifest.grid_side - 1, static_cast<int>(b.cy * manifest.grid_side));
        const int j = gy * manifest.grid_side + gx;
        for (int d = 0; d < P; ++d) {
          s.patches[static_cast<std::size_t>(j * P + d)] += manifest.signal_strength * world.forgery_direction[d];
        }
      }
      gt_box = b;
    }
    for (double& v : s.patches) v = quantize(v);

    s.content_mask.assign(static_cast<std::size_t>(L), 0);
    s.padding_mask.assign(static_cast<std::size_t>(L), 0);
    for (int p = 0; p < real_len; ++p) {
      s.padding_mask[p] = 1;
      s.content_mask[p] = !vocab.is_stop(s.tokens[p]);
    }
    s.gt_box.set(gt_box);
    s.gt_tokens.set(std::move(gt_tokens));
    s.y_v = y_v;
    s.y_t = y_t;
    s.y_m = y_v | y_t;
    std::uniform_int_distribution<std::uint64_t> seed_dist;
    s.candidates = propose_candidates(s, manifest.num_candidates, seed_dist(rng));
    out.push_back(std::move(s));
  }
  return out;
}

void validate_sample(const Sample& s) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("sample field '" + field + "': " + why);
  };
  if (s.grid_side <= 0 || s.patch_dim <= 0) fail("grid_side", "dimensions must be positive");
  if (s.patches.size() != static_cast<std::size_t>(s.num_patches() * s.patch_dim)) {
    fail("patches", "size does not match grid");
  }
  const std::size_t L = s.tokens.size();
  if (s.content_mask.size() != L) fail("content_mask", "length differs from tokens");
  if (s.padding_mask.size() != L) fail("padding_mask", "length differs from tokens");
  for (std::size_t i = 0; i < L; ++i) {
    if (s.content_mask[i] && !s.padding_mask[i]) fail("content_mask", "marks a padding position");
  }
  for (int y : {s.y_v, s.y_t, s.y_m}) {
    if (y != 0 && y != 1) fail("labels", "must be binary");
  }
  if (s.y_m != (s.y_v | s.y_t)) fail("y_m", "must equal y_v OR y_t");
  if (s.candidates.empty()) fail("candidates", "at least one candidate required");
  for (const Box& b : s.candidates) {
    if (!is_valid(b)) fail("candidates", "invalid box");
  }
  const auto& gt_box = s.gt_box.get();
  if ((s.y_v == 1) != gt_box.has_value()) fail("gt_box", "presence must match y_v");
  if (gt_box) {
    if (!is_valid(*gt_box)) fail("gt_box", "invalid box");
    int hits = 0;
    for (const Box& b : s.candidates) hits += iou(b, *gt_box) >= 0.5;
    if (hits != 1) fail("candidates", "exactly one candidate must have IoU >= 0.5");
  }
  const auto& gt_tokens = s.gt_tokens.get();
  if ((s.y_t == 1) != !gt_tokens.empty()) fail("gt_tokens", "non-emptiness must match y_t");
  for (int t : gt_tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= L || !s.content_mask[t]) {
      fail("gt_tokens", "index outside content positions");
    }
  }
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  nlohmann::ordered_json header;
  header["format"] = "ciec-synth";
  header["schema_version"] = kSchemaVersion;
  header["count"] = dataset.samples.size();
  header["manifest"] = manifest_to_json(dataset.manifest);
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    nlohmann::ordered_json r;
    r["index"] = i;
    r["grid_side"] = s.grid_side;
    r["patch_dim"] = s.patch_dim;
    r["patches"] = s.patches;
    r["tokens"] = s.tokens;
    r["content_mask"] = mask_to_ints(s.content_mask);
    r["padding_mask"] = mask_to_ints(s.padding_mask);
    auto cands = nlohmann::ordered_json::array();
    for (const Box& b : s.candidates) cands.push_back(box_to_json(b));
    r["candidates"] = cands;
    const auto& gt = s.gt_box.get();
    r["gt_box"] = gt ? box_to_json(*gt) : nlohmann::ordered_json(nullptr);
    r["gt_tokens"] = s.gt_tokens.get();
    r["y_v"] = s.y_v;
    r["y_t"] = s.y_t;
    r["y_m"] = s.y_m;
    out << r.dump() << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  write_dataset(out, dataset);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("dataset header: missing");
  Dataset ds;
  std::size_t count = 0;
  try {
    auto h = nlohmann::json::parse(line);
    if (h.at("format").get<std::string>() != "ciec-synth") throw ParseError("dataset header: wrong format tag");
    const int version = h.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      throw ParseError("dataset header: unsupported schema_version " + std::to_string(version));
    }
    count = h.at("count").get<std::size_t>();
    ds.manifest = manifest_from_json(h.at("manifest"));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(std::string("dataset header: ") + e.what());
  }

  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string where = "record " + std::to_string(i);
    if (!std::getline(in, line)) throw ParseError(where + ": missing (truncated file)");
    nlohmann::json r;
    try {
      r = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError(where + ": malformed record: " + e.what());
    }
    Sample s;
    const char* field = "index";
    try {
      if (r.at("index").get<std::size_t>() != i) throw std::invalid_argument("out of order");
      field = "grid_side";
      s.grid_side = r.at(field).get<int>();
      field = "patch_dim";
      s.patch_dim = r.at(field).get<int>();
      field = "patches";
      s.patches = r.at(field).get<std::vector<double>>();
      field = "tokens";
      s.tokens = r.at(field).get<std::vector<int>>();
      field = "content_mask";
      s.content_mask = mask_from_json(r.at(field));
      field = "padding_mask";
      s.padding_mask = mask_from_json(r.at(field));
      field = "candidates";
      for (const auto& b : r.at(field)) s.candidates.push_back(box_from_json(b));
      field = "gt_box";
      const auto& g = r.at(field);
      s.gt_box.set(g.is_null() ? std::optional<Box>{} : std::optional<Box>{box_from_json(g)});
      field = "gt_tokens";
      s.gt_tokens.set(r.at(field).get<std::vector<int>>());
      field = "y_v";
      s.y_v = r.at(field).get<int>();
      field = "y_t";
      s.y_t = r.at(field).get<int>();
      field = "y_m";
      s.y_m = r.at(field).get<int>();
    } catch (const std::exception& e) {
      throw ParseError(where + ": field '" + field + "': " + e.what());
    }
    try {
      validate_sample(s);
    } catch (const ValidationError& e) {
      throw ParseError(where + ": " + e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  return read_dataset(in);
}

}  // namespace ciec::data
