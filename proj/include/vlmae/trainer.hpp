// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop. One iteration, in order:
//   sample mask plans and MLM corruption -> online forwards (masked image,
//   clean and corrupted text, decoder, fusion) -> momentum forwards (full
//   image, clean text; no tape) -> losses -> backward -> clip -> AdamW ->
//   EMA -> metrics.
// Given the same config and seed every step is bit-reproducible, including
// across a checkpoint save and resume.

#pragma once

#include <cstddef>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmae/checkpoint.hpp"
#include "vlmae/config.hpp"
#include "vlmae/data.hpp"
#include "vlmae/losses.hpp"
#include "vlmae/model.hpp"
#include "vlmae/optim.hpp"
#include "vlmae/rng.hpp"

namespace vlmae {

// Every random draw a step makes. Negatives are mined lazily from the ITC
// logits on first use and then kept, so the same randomness can be replayed
// to recompute the losses of a step.
struct StepRandomness {
  std::vector<MaskPlan> plans;
  std::vector<data::MlmCorruption> mlm;  // per sample, positions within the row
  std::optional<losses::ItmNegatives> negatives;
};

StepRandomness sample_step_randomness(const data::Batch& batch, double mask_ratio, const data::Vocabulary& vocab,
                                      Rng& rng);

struct LossOptions {
  losses::Objectives objectives;
  losses::ItcOptions itc;
  bool rmim_normalize_targets = false;
  bool detach_decoder_text = false;

  static LossOptions from(const TrainConfig& train);
};

// Full forward pass and the selected losses. Mines ITM negatives with rng when
// randomness.negatives is empty.
losses::LossBundle compute_losses(const VlmaeModel& model, const MomentumShadow& shadow, const data::Batch& batch,
                                  StepRandomness& randomness, Rng& rng, const LossOptions& options);

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  double total = 0.0;
  std::optional<double> rmim, ifr, itc, itm, mlm;
  losses::LossDiagnostics diagnostics;
  double wall_seconds = 0.0;  // written to the timing log only

  std::string to_jsonl() const;
};

class Trainer {
 public:
  explicit Trainer(const RunConfig& config);

  // Resumes from a checkpoint directory. With override_config the run
  // continues under that config; differences from the echoed config are
  // reported through warnings().
  static std::unique_ptr<Trainer> resume(const std::string& checkpoint_dir,
                                         const std::optional<RunConfig>& override_config = std::nullopt);

  const RunConfig& config() const { return config_; }
  const data::Vocabulary& vocab() const { return vocab_; }
  const data::Dataset& dataset() const { return dataset_; }
  VlmaeModel& model() { return *model_; }
  const VlmaeModel& model() const { return *model_; }
  MomentumShadow& shadow() { return *shadow_; }
  const AdamWState& optimizer() const { return optim_; }
  const Rng& rng() const { return rng_; }
  std::size_t step_index() const { return step_; }
  std::size_t total_steps() const { return config_.total_steps(); }
  bool done() const { return step_ >= total_steps(); }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::string& last_checkpoint() const { return last_checkpoint_; }

  // Training pairs making up the batch of a given global step.
  std::vector<std::size_t> batch_indices(std::size_t step) const;
  data::Batch batch_for_step(std::size_t step) const;

  // Runs one iteration on the scheduled batch.
  MetricsRecord step();
  // Runs one iteration on an explicit batch (the schedule still advances).
  MetricsRecord step_on(const data::Batch& batch);
  // Steps until done() or max_steps iterations have run.
  void run(std::size_t max_steps = static_cast<std::size_t>(-1),
           const std::function<void(const MetricsRecord&)>& on_step = {});

  void save_checkpoint(const std::string& dir);

  // Called with "backward", "optimizer" and "ema" as each phase finishes.
  std::function<void(std::string_view)> phase_hook;

 private:
  Trainer(const RunConfig& config, bool fresh_logs);
  void open_logs(bool fresh);
  void restore(const CheckpointData& data);

  RunConfig config_;
  data::Vocabulary vocab_;
  data::Dataset dataset_;
  std::unique_ptr<VlmaeModel> model_;
  std::unique_ptr<MomentumShadow> shadow_;
  AdamWState optim_;
  LossOptions loss_options_;
  Rng rng_;
  std::size_t step_ = 0;
  std::ofstream metrics_;
  std::ofstream timing_;
  std::vector<std::string> warnings_;
  std::string last_checkpoint_;
};

}  // namespace vlmae
