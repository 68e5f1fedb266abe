// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: model, training and data sections in one JSON document.
// Every field is optional; missing fields keep their defaults, unknown keys
// are a ConfigError.

#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <string>

#include "vlmae/data.hpp"
#include "vlmae/model.hpp"

namespace vlmae {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double base_lr = 3e-4;
  double min_lr = 3e-5;
  std::size_t warmup_iters = 200;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  double momentum = 0.995;
  double distill_weight = 0.4;
  bool normalize_itc = true;
  bool rmim_normalize_targets = false;
  bool detach_decoder_text = false;
  std::string objectives = "rmim,ifr,itc,itm,mlm";
  std::uint64_t seed = 0;
  std::string metrics_path;     // JSONL, one record per step; empty = off
  std::string timing_path;      // wall time per step, kept apart from metrics
  std::string checkpoint_dir;   // final checkpoint; empty = off
  std::size_t checkpoint_every = 0;  // also save every k steps when > 0

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  data::DataConfig data;

  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return train.epochs * steps_per_epoch(); }

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace vlmae
