// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, global-norm clipping and the warmup +
// cosine learning-rate schedule.

#pragma once

#include <cstddef>
#include <vector>

#include "vlmae/model.hpp"

namespace vlmae {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

// One moment pair per registered parameter, in registry order.
struct AdamWState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamWState for_params(const std::vector<ParamRef>& params);
};

// For each parameter p with gradient g (zero when absent), t = step + 1:
//   m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
//   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//   p -= lr * wd * p_old   (only when ParamRef::decay)
// NumericError naming the parameter when a gradient is not finite.
void adamw_step(std::vector<ParamRef>& params, AdamWState& state, double lr, const AdamWOptions& options);

// Scales every gradient by min(1, max_norm / ||g||) and returns the pre-clip
// global norm. max_norm <= 0 only measures.
double clip_grad_norm(std::vector<ParamRef>& params, double max_norm);

struct Schedule {
  double base_lr = 3e-4;
  double min_lr = 3e-5;
  std::size_t warmup_iters = 200;
  std::size_t total_steps = 1;
};

// Linear warmup lr = base * step / warmup for step < warmup, then cosine from
// base at step = warmup to min at step = total - 1. Steps past the end stay at
// min.
double lr_at(std::size_t step, const Schedule& schedule);

}  // namespace vlmae
