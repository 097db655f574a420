#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ciec/errors.hpp"
#include "ciec/gradcheck.hpp"
#include "ciec/synth_data.hpp"
#include "ciec/training.hpp"

namespace fs = std::filesystem;
using namespace ciec;

namespace {

// Failure to read or write a file, or malformed file content.
struct IoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

data::ForgeryMix parse_mix(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      v.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw CLI::ValidationError("--mix", "expected four comma-separated numbers");
    }
  }
  if (v.size() != 4) throw CLI::ValidationError("--mix", "expected TT,FT,TF,FF proportions");
  return {v[0], v[1], v[2], v[3]};
}

data::Dataset load_dataset(const fs::path& path) {
  try {
    return data::read_dataset(path);
  } catch (const std::exception& e) {
    throw IoFailure(e.what());
  }
}

train::Checkpoint load_ckpt(const fs::path& path) {
  try {
    return train::load_checkpoint(path);
  } catch (const std::exception& e) {
    throw IoFailure(e.what());
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoFailure("cannot open for writing: " + path.string());
  return out;
}

struct Options {
  std::string config;
  std::uint64_t seed = 7;
  bool seed_set = false;
  std::string out;
  std::string dataset;
  std::string checkpoint;
  int num = 64;
  std::string mix;
  int steps = 0;
  int index = 0;
  double signal = data::DatasetManifest{}.signal_strength;
};

int cmd_gen_data(const Options& o) {
  data::DatasetManifest m;
  m.num_samples = o.num;
  m.seed = o.seed;
  m.signal_strength = o.signal;
  if (!o.mix.empty()) m.mix = parse_mix(o.mix);
  m.validate();
  data::Dataset d{m, data::generate_dataset(m)};
  try {
    data::write_dataset(fs::path(o.out), d);
  } catch (const std::exception& e) {
    throw IoFailure(e.what());
  }
  std::cout << "wrote " << d.samples.size() << " samples to " << o.out << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  train::TrainConfig cfg;
  if (!o.config.empty()) {
    try {
      cfg = train::load_config(o.config);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw IoFailure(e.what());
    }
  }
  if (o.seed_set) cfg.seed = o.seed;
  if (o.steps > 0) cfg.max_steps = o.steps;
  cfg.validate();
  std::cout << "# effective configuration\n";
  train::write_config(std::cout, cfg);

  const auto ds = load_dataset(o.dataset);
  const auto [train_set, val_set] = train::split_validation(ds.samples, cfg.val_fraction);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  auto log = open_out(dir / "train_log.jsonl");
  auto result = train::train(cfg, train_set, val_set, [&](const train::LogRow& row) {
    train::write_log_row(log, row);
    if (row.step % cfg.eval_every == 0) spdlog::info("step {} total {:.6f}", row.step, row.losses.total);
  });
  try {
    train::save_checkpoint(dir / "final.ckpt", result.final_checkpoint);
    train::save_checkpoint(dir / "best.ckpt", result.best_checkpoint);
  } catch (const std::exception& e) {
    throw IoFailure(e.what());
  }
  std::cout << "steps " << result.log.size() << ", best step " << result.best_step << ", checkpoints in "
            << dir.string() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const auto ckpt = load_ckpt(o.checkpoint);
  const auto ds = load_dataset(o.dataset);
  auto model = train::load_model(ckpt);
  auto result = train::evaluate(model, ds.samples);
  auto j = metrics::to_json(result.report);
  j["box_selection_accuracy"] = result.box_selection_accuracy;
  std::cout << j.dump(2) << '\n';
  if (!o.out.empty()) open_out(o.out) << j.dump(2) << '\n';
  return 0;
}

int cmd_gradcheck(const Options& o) {
  auto results = gradcheck::run_all(o.seed);
  gradcheck::write_table(std::cout, results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  std::cout << (ok ? "all losses pass\n" : "gradient check FAILED\n");
  return ok ? 0 : 1;
}

int cmd_inspect(const Options& o) {
  const auto ckpt = load_ckpt(o.checkpoint);
  const auto ds = load_dataset(o.dataset);
  if (o.index < 0 || static_cast<std::size_t>(o.index) >= ds.samples.size()) {
    throw CLI::ValidationError("--index", "out of range for dataset of " + std::to_string(ds.samples.size()));
  }
  auto model = train::load_model(ckpt);
  const auto weak = train::weak_view(ds.samples[static_cast<std::size_t>(o.index)]);
  ag::NoGradGuard no_grad;
  const auto f = model.forward(weak, train::Phase::kEval);
  const auto pred = train::predict(model, weak);
  const int G = model.config().grid_side;

  nlohmann::ordered_json trps_dump;
  trps_dump["y_v_coarse"] = f.y_v_coarse.item();
  trps_dump["gate_open"] = f.gate;
  auto heat = nlohmann::ordered_json::array();
  for (int r = 0; r < G; ++r) {
    std::vector<double> row;
    for (int c = 0; c < G; ++c) row.push_back(f.p_patch.value()(r * G + c, 0));
    heat.push_back(row);
  }
  trps_dump["P_p"] = heat;
  auto cands = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < weak.candidates.size(); ++i) {
    const Box& b = weak.candidates[i];
    const auto r = static_cast<ag::Index>(i);
    cands.push_back({{"box", {b.cx, b.cy, b.w, b.h}},
                     {"S_iv", f.candidates.s_iv.value()(r, 0)},
                     {"S_ev", f.candidates.s_ev.value()(r, 0)},
                     {"S_v", f.candidates.s_v.value()(r, 0)}});
  }
  trps_dump["candidates"] = cands;
  trps_dump["best_candidate"] = pred.best_candidate;
  trps_dump["box"] = pred.box ? nlohmann::ordered_json({pred.box->cx, pred.box->cy, pred.box->w, pred.box->h})
                              : nlohmann::ordered_json(nullptr);
  const auto open_mask = ag::slice_rows(f.masks, pred.best_candidate, 1).value();
  const auto bg = trps::background_indicator(open_mask, ckpt.config.trps.eps);
  auto bitmap = nlohmann::ordered_json::array();
  for (int r = 0; r < G; ++r) {
    std::string row;
    for (int c = 0; c < G; ++c) row += bg[static_cast<std::size_t>(r * G + c)] ? '.' : '#';
    bitmap.push_back(row);
  }
  trps_dump["I_bg"] = bitmap;

  std::vector<char> in_o(weak.tokens.size(), 0);
  for (int l : vctg::sparse_set(f.s_t.value(), weak.content_mask, ckpt.config.vctg.k2_ratio)) {
    in_o[static_cast<std::size_t>(l)] = 1;
  }
  auto tokens = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < weak.tokens.size(); ++l) {
    const auto r = static_cast<ag::Index>(l);
    tokens.push_back({{"position", l},
                      {"token", weak.tokens[l]},
                      {"content", weak.content_mask[l] != 0},
                      {"S_it", f.s_it.value()(r, 0)},
                      {"S_et", f.s_et.value()(r, 0)},
                      {"S_t", f.s_t.value()(r, 0)},
                      {"S_raw", f.s_raw.value()(r, 0)},
                      {"in_O", in_o[l] != 0}});
  }
  nlohmann::ordered_json vctg_dump;
  vctg_dump["y_t_coarse"] = f.y_t_coarse.item();
  vctg_dump["y_t_fine"] = f.y_t_fine.item();
  vctg_dump["tokens"] = tokens;
  vctg_dump["predicted_tokens"] = pred.tokens;

  nlohmann::ordered_json j;
  j["index"] = o.index;
  j["y_m_score"] = pred.y_m;
  j["trps"] = trps_dump;
  j["vctg"] = vctg_dump;
  std::cout << j.dump(2) << '\n';
  if (!o.out.empty()) open_out(o.out) << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly-supervised image-text manipulation localization toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--num", o.num, "Number of samples")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", o.seed, "Generator seed");
  gen->add_option("--mix", o.mix, "TT,FT,TF,FF proportions");
  gen->add_option("--signal", o.signal, "Mean shift of forged patches");
  gen->add_option("--out", o.out, "Output dataset file")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "key = value config file");
  tr->add_option("--dataset", o.dataset, "Training dataset file")->required();
  tr->add_option("--out", o.out, "Output directory for checkpoints and log")->required();
  tr->add_option("--seed", o.seed, "Overrides the config seed")->each([&](const std::string&) { o.seed_set = true; });
  tr->add_option("--steps", o.steps, "Overrides epochs with a step count")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  ev->add_option("--dataset", o.dataset, "Dataset file")->required();
  ev->add_option("--out", o.out, "Metrics JSON output file");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  gc->add_option("--seed", o.seed, "Input seed");

  auto* in = app.add_subcommand("inspect", "Dump localization scores for one sample");
  in->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  in->add_option("--dataset", o.dataset, "Dataset file")->required();
  in->add_option("--index", o.index, "Sample index")->required();
  in->add_option("--out", o.out, "JSON output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*gc) return cmd_gradcheck(o);
    if (*in) return cmd_inspect(o);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const IoFailure& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
