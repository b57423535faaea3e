// SPDX-License-Identifier: Apache-2.0
//
// uwfuse: synthesize data, train, run the generator ablation, evaluate and
// enhance single images.
//
//   uwfuse synth  --out data --count 64 --size 32
//   uwfuse train  --manifest data/manifest.tsv --out run --objective mse_only
//   uwfuse ablate --manifest data/manifest.tsv --out abl --seeds 0 1 2
//   uwfuse eval   --checkpoint run/checkpoint.bin --manifest data/manifest.tsv --report run/report.tsv
//   uwfuse infer  --checkpoint run/checkpoint.bin --input in.png --output out.png
//
// Any subcommand accepts --config FILE with `key = value` lines using the
// flag names; flags given on the command line win.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <memory>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "uwfuse.hpp"

namespace {

using namespace uwfuse;

struct TrainFlags {
  TrainConfig cfg;
  std::string objective = "cwgan_gp_l1";
  std::string variant = "Ours";

  void add(CLI::App* app) {
    app->add_option("--lambda-gp", cfg.lambda_gp, "gradient penalty weight")->capture_default_str();
    app->add_option("--lambda-l1", cfg.lambda_l1, "L1 reconstruction weight")->capture_default_str();
    app->add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--beta1", cfg.beta1)->capture_default_str();
    app->add_option("--beta2", cfg.beta2)->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    app->add_option("--epochs", cfg.epochs)->capture_default_str();
    app->add_option("--critic-steps", cfg.critic_steps, "critic updates per generator update")->capture_default_str();
    app->add_option("--seed", cfg.seed)->capture_default_str();
    app->add_option("--max-steps", cfg.max_steps, "stop after this many iterations (0: all epochs)")
        ->capture_default_str();
    app->add_option("--objective", objective, "cwgan_gp_l1 or mse_only")->capture_default_str();
    app->add_option("--input-size", cfg.model.input_size)->capture_default_str();
    app->add_option("--in-channels", cfg.model.in_channels)->capture_default_str();
    app->add_option("--base-channels", cfg.model.base_channels)->capture_default_str();
    app->add_option("--max-channels", cfg.model.max_channels)->capture_default_str();
    app->add_option("--disc-layers", cfg.model.disc_layers)->capture_default_str();
    app->add_option("--variant", variant, "G2 UNet UNetRB UNetGF OursNoGF Ours")->capture_default_str();
  }

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.objective = parse_objective(objective);
    c.model.variant = parse_variant(variant);
    c.validate();
    return c;
  }
};

// Turns the `--config FILE` entries into flags placed right after the
// subcommand name, ahead of the user's own flags.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> injected;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    std::ifstream in(file, std::ios::binary);
    if (!in) throw Error("cannot read config file '" + file + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [key, value] : text::parse_key_values(ss.str())) {
      std::string flag = "--" + key;
      for (char& c : flag)
        if (c == '_') c = '-';
      injected.push_back(flag);
      for (const std::string& w : text::words(value)) injected.push_back(w);
    }
  }
  if (rest.empty()) return rest;
  std::vector<std::string> out{rest[0]};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Underwater color correction with a multi-scale conditional GAN"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;
  app.add_option("--config", config_file, "key = value file; command-line flags override it");

  // synth
  auto* synth = app.add_subcommand("synth", "write degraded/clean pairs and a manifest");
  SynthOptions so;
  std::string synth_out;
  std::string source_dir;
  std::vector<float> beta{so.params.beta.begin(), so.params.beta.end()};
  std::vector<float> background{so.params.background.begin(), so.params.background.end()};
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", so.count)->capture_default_str();
  synth->add_option("--size", so.size, "side length of the written images")->capture_default_str();
  synth->add_option("--source-dir", source_dir, "directory of clean PNGs (procedural textures if omitted)");
  synth->add_option("--beta", beta, "per-channel attenuation r g b")->expected(3);
  synth->add_option("--background", background, "veiling light r g b")->expected(3);
  synth->add_option("--depth-min", so.params.depth_min)->capture_default_str();
  synth->add_option("--depth-max", so.params.depth_max)->capture_default_str();
  synth->add_option("--noise-sigma", so.params.noise_sigma)->capture_default_str();
  synth->add_option("--seed", so.params.seed)->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a generator (and critic)");
  TrainFlags tf;
  tf.add(train_cmd);
  std::string train_manifest, train_out, resume;
  std::int64_t progress = 50;
  train_cmd->add_option("--manifest", train_manifest)->required();
  train_cmd->add_option("--out", train_out, "run directory")->required();
  train_cmd->add_option("--resume", resume, "continue from this checkpoint");
  train_cmd->add_option("--progress", progress, "print every N steps (0: quiet)")->capture_default_str();

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "compare the six generator structures under MSE training");
  TrainFlags af;
  af.add(ablate_cmd);
  std::string ablate_manifest, ablate_out;
  std::vector<std::uint64_t> seeds{0};
  ablate_cmd->add_option("--manifest", ablate_manifest)->required();
  ablate_cmd->add_option("--out", ablate_out)->required();
  ablate_cmd->add_option("--seeds", seeds, "one run per seed; table reports medians");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, report, baseline, image_dir;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--report", report)->required();
  eval_cmd->add_option("--baseline", baseline, "also write the identity (degraded input) report here");
  eval_cmd->add_option("--images", image_dir, "save enhanced images here");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "enhance one image");
  std::string infer_ckpt, input, output;
  infer_cmd->add_option("--checkpoint", infer_ckpt)->required();
  infer_cmd->add_option("--input", input)->required();
  infer_cmd->add_option("--output", output)->required();

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (synth->parsed()) {
      if (!source_dir.empty()) so.source_dir = source_dir;
      std::copy(beta.begin(), beta.end(), so.params.beta.begin());
      std::copy(background.begin(), background.end(), so.params.background.begin());
      const Manifest m = synth_dataset(so, synth_out);
      std::cout << "wrote " << m.entries.size() << " pairs to " << synth_out << "\n";
    } else if (train_cmd->parsed()) {
      std::unique_ptr<TrainState> state;
      bool append = false;
      if (!resume.empty()) {
        state = std::make_unique<TrainState>(load_checkpoint(resume));
        if (train_cmd->count("--epochs")) state->config.epochs = tf.cfg.epochs;
        if (train_cmd->count("--max-steps")) state->config.max_steps = tf.cfg.max_steps;
        append = true;
      } else {
        state = std::make_unique<TrainState>(tf.resolve());
      }
      const Dataset data = load_pairs(train_manifest, state->config.model.input_size);
      if (data.skipped) std::cerr << "skipped " << data.skipped << " unreadable pairs\n";
      TrainOptions opt;
      opt.out_dir = train_out;
      opt.append_logs = append;
      opt.progress_every = progress;
      train(*state, data, opt);
      std::cout << "trained to step " << state->step << "; checkpoint at "
                << (std::filesystem::path(train_out) / "checkpoint.bin").string() << "\n";
    } else if (ablate_cmd->parsed()) {
      AblationOptions opt;
      opt.base = af.resolve();
      opt.seeds = seeds;
      opt.out_dir = ablate_out;
      opt.progress = true;
      const Dataset data = load_pairs(ablate_manifest, opt.base.model.input_size);
      for (const AblationRow& r : ablate(data, opt))
        std::cout << variant_label(r.variant) << '\t' << r.psnr << '\t' << r.mse << '\n';
    } else if (eval_cmd->parsed()) {
      const TrainState s = load_checkpoint(eval_ckpt);
      const Dataset data = load_pairs(eval_manifest, s.config.model.input_size);
      const MetricReport r = evaluate(s.generator, data, image_dir);
      write_report(report, r);
      std::cout << "mean psnr " << text::format(r.mean_psnr()) << "  ssim " << text::format(r.mean_ssim())
                << "  mse " << text::format(r.mean_mse()) << "  (" << r.count() << " images)\n";
      if (!baseline.empty()) write_report(baseline, evaluate_identity(data));
    } else if (infer_cmd->parsed()) {
      infer(infer_ckpt, input, output);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
