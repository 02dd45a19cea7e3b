// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, eval, predict, ablate, synth.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "bilingunet/run.hpp"

namespace fs = std::filesystem;
using namespace bilingunet;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::string current;
  for (char ch : text) {
    if (ch == ',' || ch == ' ') {
      if (!current.empty()) items.push_back(current);
      current.clear();
    } else {
      current += ch;
    }
  }
  if (!current.empty()) items.push_back(current);
  return items;
}

void print_progress(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

int run_train(const std::string& config_path, bool quiet) {
  const RunConfig config = load_run_config(config_path);
  const Dataset data = prepare_dataset(config);
  TrainHooks hooks;
  hooks.log_path = fs::path(config.output_dir) / "metrics.jsonl";
  hooks.checkpoint_path = fs::path(config.output_dir) / "best.ckpt";
  if (!quiet) hooks.progress = print_progress;
  TrainResult result = train(config, data, hooks);
  nlohmann::ordered_json summary;
  summary["checkpoint"] = hooks.checkpoint_path.string();
  summary["best_epoch"] = result.best.epoch;
  summary["val"] = nlohmann::ordered_json::parse(
      evaluate(result.best, data.samples, data.split.val, config.threshold).to_json());
  summary["test"] = nlohmann::ordered_json::parse(
      evaluate(result.best, data.samples, data.split.test, config.threshold).to_json());
  std::cout << summary.dump() << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& split, double threshold) {
  Model model = load_checkpoint(ckpt);
  const Dataset data = prepare_dataset(model.config);
  const auto& idx = split_indices(data, split);
  std::cout << evaluate(model, data.samples, idx, threshold > 0 ? threshold : model.config.threshold).to_json()
            << '\n';
  return 0;
}

int run_predict(const std::string& ckpt, const std::string& image_path, const std::string& expr,
                double threshold, std::string mask_out, std::string prob_out) {
  Model model = load_checkpoint(ckpt);
  const Image8 image = read_image(image_path);
  const Prediction pred = predict(model, image, expr, threshold);
  const fs::path stem = fs::path(image_path).parent_path() / fs::path(image_path).stem();
  if (mask_out.empty()) mask_out = stem.string() + "_mask.png";
  if (prob_out.empty()) prob_out = stem.string() + "_prob.png";
  Image8 mask{image.height, image.width, 1, {}};
  Image8 heat{image.height, image.width, 1, {}};
  mask.pixels.resize(image.height * image.width);
  heat.pixels.resize(image.height * image.width);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    mask.pixels[i] = pred.mask.bits[i] ? 255 : 0;
    heat.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pred.probabilities[i], 0.0f, 1.0f) * 255.0f));
  }
  write_image(mask_out, mask);
  write_image(prob_out, heat);
  nlohmann::ordered_json out{{"mask", mask_out}, {"probabilities", prob_out}, {"pixels", pred.mask.count()}};
  std::cout << out.dump() << '\n';
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& variants, const std::string& seeds,
               bool quiet) {
  const RunConfig config = load_run_config(config_path);
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) {
    try {
      seed_list.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("bad seed \"" + s + "\"");
    }
  }
  if (seed_list.empty()) seed_list.push_back(config.seed);
  TrainHooks hooks;
  hooks.log_path = "metrics.jsonl";
  hooks.checkpoint_path = "best.ckpt";
  if (!quiet) hooks.progress = print_progress;
  const auto rows = ablate(config, split_list(variants), seed_list, hooks);
  const std::string table = format_ablation_table(rows);
  std::cout << table;
  fs::create_directories(config.output_dir);
  std::ofstream(fs::path(config.output_dir) / "ablation.txt") << table;
  return 0;
}

int run_synth(const std::string& out, std::size_t n, std::uint64_t seed, int size, const std::string& format) {
  SynthConfig sc;
  sc.height = sc.width = size;
  const auto samples = generate_dataset(n, seed, sc);
  save_dataset(samples, out, format == "ppm" ? ".ppm" : ".png");
  std::cout << nlohmann::ordered_json{{"out", out}, {"n", n}, {"seed", seed}}.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-conditioned U-Net for referring-expression segmentation"};
  app.require_subcommand(1);

  std::string config_path, ckpt, split = "val", image_path, expr, variants, seeds, out, format = "png";
  std::string mask_out, prob_out;
  double threshold = 0.5;
  double eval_threshold = 0.0;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  int size = 64;
  bool quiet = false;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  train_cmd->add_flag("--quiet", quiet, "Suppress per-epoch progress on stderr");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a data split");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--threshold", eval_threshold, "Mask threshold (default: from checkpoint)");

  auto* predict_cmd = app.add_subcommand("predict", "Segment one image for one expression");
  predict_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  predict_cmd->add_option("--image", image_path, "Input image (.png, .ppm, .pgm)")->required();
  predict_cmd->add_option("--expr", expr, "Referring expression")->required();
  predict_cmd->add_option("--threshold", threshold, "Mask threshold");
  predict_cmd->add_option("--mask-out", mask_out, "Output mask PNG");
  predict_cmd->add_option("--prob-out", prob_out, "Output probability heatmap PNG");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare model variants");
  ablate_cmd->add_option("--config", config_path, "Base run config (JSON)")->required();
  ablate_cmd->add_option("--variants", variants, "Comma-separated variant names")->required();
  ablate_cmd->add_option("--seeds", seeds, "Comma-separated training seeds (default: config seed)");
  ablate_cmd->add_flag("--quiet", quiet, "Suppress per-epoch progress on stderr");

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset to disk");
  synth_cmd->add_option("--out", out, "Output directory")->required();
  synth_cmd->add_option("--n", n, "Number of samples")->required();
  synth_cmd->add_option("--seed", seed, "Generation seed")->required();
  synth_cmd->add_option("--size", size, "Canvas side in pixels");
  synth_cmd->add_option("--format", format, "png or ppm")->check(CLI::IsMember({"png", "ppm"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return run_train(config_path, quiet);
    if (*eval_cmd) return run_eval(ckpt, split, eval_threshold);
    if (*predict_cmd) return run_predict(ckpt, image_path, expr, threshold, mask_out, prob_out);
    if (*ablate_cmd) return run_ablate(config_path, variants, seeds, quiet);
    if (*synth_cmd) return run_synth(out, n, seed, size, format);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
