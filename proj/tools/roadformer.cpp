// SPDX-License-Identifier: Apache-2.0
//
// roadformer: gen-data, train, eval, predict and ablate subcommands.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "roadformer/train.hpp"

namespace fs = std::filesystem;
using namespace roadformer;

namespace {

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg = path.empty() ? Config{} : Config::load(path);
  for (const auto& kv : overrides) cfg.apply_override(kv);
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct JsonLog {
  std::ofstream file;
  bool echo = false;
  void operator()(const nlohmann::json& j) {
    file << j.dump() << '\n';
    file.flush();
    if (echo) std::cout << j.dump() << '\n';
  }
};

int cmd_gen_data(const std::string& out, int count, std::uint64_t seed, int height, int width) {
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  const auto m = generate_dataset(out, count, seed, spec);
  for (const auto& [name, ids] : m.splits) std::cout << name << ": " << ids.size() << " samples\n";
  std::cout << "wrote " << out << '\n';
  return 0;
}

int cmd_train(const Config& cfg, bool quiet) {
  const auto manifest = DatasetManifest::load(cfg.data.root);
  auto train = load_split(manifest, cfg.data.train_split, cfg);
  std::optional<std::vector<PreparedSample>> val;
  if (cfg.train.eval_every > 0 || manifest.splits.count(cfg.data.val_split))
    if (manifest.splits.count(cfg.data.val_split) && !manifest.split(cfg.data.val_split).empty())
      val = load_split(manifest, cfg.data.val_split, cfg);

  fs::create_directories(cfg.train.out);
  const std::string log_path = cfg.train.log.empty() ? (fs::path(cfg.train.out) / "train.jsonl").string() : cfg.train.log;
  JsonLog log{std::ofstream(log_path), !quiet};
  if (!log.file) throw IoError("cannot write log " + log_path);
  {
    std::ofstream c(fs::path(cfg.train.out) / "config.txt");
    c << cfg.to_text();
  }

  Trainer trainer(cfg, std::move(train));
  const RunResult r = train_model(trainer, val ? &*val : nullptr, std::ref(log));
  const std::string ckpt = (fs::path(cfg.train.out) / "checkpoint.bin").string();
  save_checkpoint(ckpt, trainer.model(), trainer.state());

  const auto classes = manifest.classes;
  nlohmann::json summary{{"train", r.train_eval.to_json(classes)}};
  if (r.val_eval) summary["val"] = r.val_eval->to_json(classes);
  std::ofstream(fs::path(cfg.train.out) / "metrics.json") << summary.dump(2) << '\n';
  std::cout << "train split\n" << format_table(r.train_eval, classes);
  if (r.val_eval) std::cout << "val split\n" << format_table(*r.val_eval, classes);
  std::cout << "checkpoint " << ckpt << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& split, const std::string& data_root,
             const std::string& out_path, const std::vector<std::string>& hidden) {
  auto ckpt = load_checkpoint(ckpt_path);
  const Config& cfg = ckpt.model.config();
  const auto manifest = DatasetManifest::load(data_root.empty() ? cfg.data.root : data_root);
  const auto samples = load_split(manifest, split, cfg);
  const EvalResult r = evaluate(ckpt.model, samples);
  std::cout << format_table(r, manifest.classes, hidden);
  if (!out_path.empty()) std::ofstream(out_path) << r.to_json(manifest.classes).dump(2) << '\n';
  return 0;
}

Grid<double> load_rgb(const std::string& path) {
  const auto raw = read_png_rgb8(path);
  Grid<double> rgb(raw.height, raw.width, 3);
  for (std::size_t i = 0; i < raw.data.size(); ++i) rgb.data[i] = raw.data[i] / 255.0;
  return rgb;
}

/// Explicit path, else `<dataset root>/intrinsics` next to a `<root>/<split>/` depth file.
CameraIntrinsics resolve_intrinsics(const std::string& explicit_path, const std::string& depth_path) {
  if (!explicit_path.empty()) return CameraIntrinsics::load(explicit_path);
  const fs::path guess = fs::absolute(depth_path).parent_path().parent_path() / "intrinsics";
  if (fs::exists(guess)) return CameraIntrinsics::load(guess.string());
  throw ConfigError("predict: no camera intrinsics for depth-to-normal conversion (pass --intrinsics)");
}

int cmd_predict(const std::string& ckpt_path, const std::string& rgb_path, const std::string& depth_path,
                const std::string& gt_path, const std::string& intr_path, const std::string& out_dir, bool pad) {
  auto ckpt = load_checkpoint(ckpt_path);
  const Config& cfg = ckpt.model.config();
  const auto intr = resolve_intrinsics(intr_path, depth_path);
  const auto rgb = load_rgb(rgb_path);
  const auto depth = load_depth_png(depth_path);
  const SemanticResult r = predict(ckpt.model, rgb, depth, intr, pad);

  fs::create_directories(out_dir);
  std::string stem = fs::path(rgb_path).stem().string();
  if (stem.size() > 4 && stem.ends_with("_rgb")) stem.resize(stem.size() - 4);
  const fs::path base = fs::path(out_dir) / stem;
  auto classes = default_classes();
  classes.resize(static_cast<std::size_t>(std::min<int>(cfg.num_classes, static_cast<int>(classes.size()))));
  write_png_palette(base.string() + "_pred.png", r.labels, palette_of(classes));
  write_npy(base.string() + "_prob.npy", r.probabilities.data, {r.probabilities.channels, r.labels.height, r.labels.width});
  std::cout << "wrote " << base.string() << "_pred.png, " << base.string() << "_prob.npy\n";
  if (!gt_path.empty()) {
    const auto gt = read_png_indices(gt_path);
    Grid<std::uint8_t> rgb8(rgb.height, rgb.width, 3);
    for (std::size_t i = 0; i < rgb8.data.size(); ++i)
      rgb8.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb.data[i], 0.0, 1.0) * 255.0));
    write_png_rgb8(base.string() + "_overlay.png", overlay(rgb8, r.labels, gt, cfg.data.ignore_id));
    std::size_t agree = 0, counted = 0;
    for (std::size_t i = 0; i < gt.data.size(); ++i)
      if (gt.data[i] != cfg.data.ignore_id) {
        ++counted;
        agree += gt.data[i] == r.labels.data[i];
      }
    std::cout << "wrote " << base.string() << "_overlay.png; pixel agreement "
              << (counted ? 100.0 * static_cast<double>(agree) / static_cast<double>(counted) : 0.0) << "%\n";
  }
  return 0;
}

int cmd_ablate(Config base, const std::vector<std::string>& modes, const std::vector<std::uint64_t>& seeds,
               const std::string& split) {
  const auto manifest = DatasetManifest::load(base.data.root);
  nlohmann::json all;
  std::cout << "mode          seed   mIoU  defect IoU\n";
  for (const auto& mode : modes) {
    Config cfg = base;
    if (mode == "rgb") cfg.modality = Modality::kRgb;
    else {
      cfg.modality = Modality::kRgbNormal;
      cfg.fusion = parse_fusion_mode(mode);
    }
    const auto train = load_split(manifest, cfg.data.train_split, cfg);
    const auto test = load_split(manifest, split, cfg);
    std::vector<double> mious;
    for (auto seed : seeds) {
      cfg.seed = seed;
      Trainer t(cfg, train);
      while (t.state().step < cfg.train.steps) t.step();
      const EvalResult e = evaluate(t.model(), test);
      const double m = e.report.miou.value_or(0.0);
      mious.push_back(m);
      all[mode].push_back({{"seed", seed}, {"metrics", e.to_json(manifest.classes)}});
      std::printf("%-12s %5llu %6.2f %8.2f\n", mode.c_str(), static_cast<unsigned long long>(seed), 100.0 * m,
                  100.0 * e.iou(kDefect));
      std::fflush(stdout);
    }
    std::sort(mious.begin(), mious.end());
    std::printf("%-12s median mIoU %.2f\n", mode.c_str(), 100.0 * mious[mious.size() / 2]);
  }
  fs::create_directories(base.train.out);
  std::ofstream(fs::path(base.train.out) / "ablation.json") << all.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-Normal road scene parser"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  int count = 100, height = 64, width = 96;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", count, "number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--height", height, "image height (multiple of 32)");
  gen->add_option("--width", width, "image width (multiple of 32)");

  std::string config_path;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "train a model");
  bool quiet = false;
  train->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "override key=value (repeatable)");
  train->add_flag("--quiet", quiet, "do not echo step records");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ckpt, split = "test", data_root, eval_out, hide;
  eval->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split);
  eval->add_option("--data", data_root, "dataset root (defaults to the checkpoint's data.root)");
  eval->add_option("--out", eval_out, "write metrics JSON here");
  eval->add_option("--hide", hide, "comma-separated class names left out of the table");

  auto* pred = app.add_subcommand("predict", "predict one image");
  std::string rgb, depth, gt, intr, pred_out = ".";
  bool pad = false;
  pred->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  pred->add_option("--rgb", rgb)->required()->check(CLI::ExistingFile);
  pred->add_option("--depth", depth, "16-bit depth PNG in millimetres")->required()->check(CLI::ExistingFile);
  pred->add_option("--gt", gt, "label PNG; enables the overlay")->check(CLI::ExistingFile);
  pred->add_option("--intrinsics", intr)->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "output directory");
  pred->add_flag("--pad", pad, "pad inputs to the encoder stride and crop the outputs");

  auto* ablate = app.add_subcommand("ablate", "train and test several fusion modes");
  std::string modes = "concat,seb,hffm,ffrm,hffm+ffrm", seeds = "0,1,2", ablate_split = "test";
  ablate->add_option("--modes", modes, "comma-separated fusion modes; 'rgb' selects the single-modal model");
  ablate->add_option("--seeds", seeds, "comma-separated model seeds");
  ablate->add_option("--split", ablate_split, "held-out split");
  ablate->add_option("--config", config_path)->check(CLI::ExistingFile);
  ablate->add_option("--set", overrides);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(gen_out, count, gen_seed, height, width);
    if (*train) return cmd_train(load_config(config_path, overrides), quiet);
    if (*eval) return cmd_eval(ckpt, split, data_root, eval_out, split_list(hide));
    if (*pred) return cmd_predict(ckpt, rgb, depth, gt, intr, pred_out, pad);
    if (*ablate) {
      std::vector<std::uint64_t> seed_list;
      for (const auto& s : split_list(seeds)) seed_list.push_back(std::stoull(s));
      if (seed_list.empty()) throw ConfigError("ablate: no seeds");
      return cmd_ablate(load_config(config_path, overrides), split_list(modes), seed_list, ablate_split);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
