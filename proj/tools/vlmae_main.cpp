// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// vlmae: train, evaluate and analyse desk-scale models.
//
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
// abort.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "vlmae/checkpoint.hpp"
#include "vlmae/config.hpp"
#include "vlmae/errors.hpp"
#include "vlmae/eval.hpp"
#include "vlmae/macs.hpp"
#include "vlmae/trainer.hpp"

namespace {

using namespace vlmae;

int cmd_train(const std::string& config_path, const std::string& resume, std::size_t log_every) {
  std::unique_ptr<Trainer> trainer;
  if (resume.empty()) {
    trainer = std::make_unique<Trainer>(RunConfig::load(config_path));
  } else {
    std::optional<RunConfig> cfg;
    if (!config_path.empty()) cfg = RunConfig::load(config_path);
    trainer = Trainer::resume(resume, cfg);
    for (const auto& w : trainer->warnings()) std::cerr << "warning: config differs from checkpoint: " << w << '\n';
  }
  const std::size_t total = trainer->total_steps();
  trainer->run(static_cast<std::size_t>(-1), [&](const MetricsRecord& r) {
    if (log_every && (r.step % log_every == 0 || r.step + 1 == total)) {
      std::fprintf(stderr, "step %zu/%zu  loss %.4f  lr %.2e  tau %.4f  %.2fs\n", r.step + 1, total, r.total, r.lr,
                   r.tau, r.wall_seconds);
    }
  });
  const auto& held = trainer->dataset().held_out;
  const auto report = eval::retrieval_eval(trainer->model(), held, trainer->config().data, trainer->vocab(), false);
  std::printf("held-out t2i R@1 %.4f R@5 %.4f R@10 %.4f | i2t R@1 %.4f R@5 %.4f R@10 %.4f\n", report.t2i_r1,
              report.t2i_r5, report.t2i_r10, report.i2t_r1, report.i2t_r5, report.i2t_r10);
  if (!trainer->last_checkpoint().empty()) std::printf("checkpoint %s\n", trainer->last_checkpoint().c_str());
  return 0;
}

std::unique_ptr<Trainer> load_for_eval(const std::string& ckpt) { return Trainer::resume(ckpt); }

int cmd_eval(const std::string& ckpt, const std::string& split, bool rerank, const std::string& out) {
  auto trainer = load_for_eval(ckpt);
  const auto& ds = trainer->dataset();
  const auto& records = split == "train" ? ds.train : ds.held_out;
  const auto report = eval::retrieval_eval(trainer->model(), records, trainer->config().data, trainer->vocab(), rerank);
  nlohmann::ordered_json j = {{"split", split},          {"method", report.method}, {"gallery", report.gallery},
                              {"t2i_r1", report.t2i_r1}, {"t2i_r5", report.t2i_r5}, {"t2i_r10", report.t2i_r10},
                              {"i2t_r1", report.i2t_r1}, {"i2t_r5", report.i2t_r5}, {"i2t_r10", report.i2t_r10}};
  std::cout << j.dump(2) << '\n';
  if (!out.empty()) eval::emit_plot_data(report, out);
  return 0;
}

int cmd_attention(const std::string& ckpt, const std::string& out, std::size_t images, double threshold) {
  auto trainer = load_for_eval(ckpt);
  const auto set = eval::attention_set(trainer->config(), images);
  const auto stats = eval::focal_bias_stats(trainer->model(), set, trainer->config().data, trainer->vocab(), threshold);
  eval::emit_plot_data(stats, out);
  const auto hist_path = std::filesystem::path(out).replace_extension(".hist.csv").string();
  eval::emit_histogram(stats, hist_path);
  std::printf("images %zu  low-attention fraction %.4f +- %.4f  entropy %.4f +- %.4f\n", stats.profiles.size(),
              stats.mean_low, stats.std_low, stats.mean_entropy, stats.std_entropy);
  std::printf("wrote %s and %s\n", out.c_str(), hist_path.c_str());
  return 0;
}

int cmd_macs(const std::string& config_path, double alpha, bool paper, std::size_t batch) {
  ModelConfig model = paper ? ModelConfig::paper_preset() : RunConfig::load(config_path).model;
  const MacsReport rep = count_macs(model, alpha, batch);
  std::printf("%-24s %6s %6s %16s\n", "component", "passes", "tokens", "MACs");
  for (const auto& e : rep.entries) {
    std::printf("%-24s %6zu %6zu %16.0f\n", e.component.c_str(), e.passes, e.tokens, e.macs);
  }
  std::printf("%-24s %6s %6s %16.0f\n", "total", "", "", rep.total);
  std::printf("ratio vs mask ratio 0: %.4f\n", rep.ratio_vs_dense);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale vision-language masked autoencoder"};
  app.require_subcommand(1);

  std::string config_path, resume, ckpt, split = "held-out", out;
  std::size_t log_every = 50, images = 256, batch = 1;
  double alpha = 0.5, threshold = 0.5;
  bool rerank = false, paper = false;

  auto* train = app.add_subcommand("train", "Pre-train a model");
  train->add_option("--config", config_path, "JSON run config");
  train->add_option("--resume", resume, "Checkpoint directory to continue from");
  train->add_option("--log-every", log_every, "Progress line interval (0 = silent)");

  auto* ev = app.add_subcommand("eval", "Image-text retrieval on a split");
  ev->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  ev->add_option("--split", split, "held-out or train")->check(CLI::IsMember({"held-out", "train"}));
  ev->add_flag("--rerank", rerank, "Rerank the top 8 candidates by ITM");
  ev->add_option("--out", out, "Also write recalls as CSV");

  auto* att = app.add_subcommand("analyze-attention", "[CLS] attention statistics on held-out scenes");
  att->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  att->add_option("--out", out, "CSV output path")->required();
  att->add_option("--images", images, "Number of held-out scenes");
  att->add_option("--threshold", threshold, "Low-attention cutoff as a multiple of 1/N");

  auto* macs = app.add_subcommand("count-macs", "Analytic MACs of one training forward");
  macs->add_option("--config", config_path, "JSON run config");
  macs->add_option("--mask-ratio", alpha, "Mask ratio")->required();
  macs->add_flag("--paper-preset", paper, "Use the full-size architecture");
  macs->add_option("--batch", batch, "Batch size");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      if (config_path.empty() && resume.empty()) throw ConfigError("train needs --config or --resume");
      return cmd_train(config_path, resume, log_every);
    }
    if (*ev) return cmd_eval(ckpt, split, rerank, out);
    if (*att) return cmd_attention(ckpt, out, images, threshold);
    if (*macs) {
      if (config_path.empty() && !paper) throw ConfigError("count-macs needs --config or --paper-preset");
      return cmd_macs(config_path, alpha, paper, batch);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
