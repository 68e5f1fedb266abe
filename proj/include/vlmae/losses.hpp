// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// The five pre-training objectives and their unweighted sum. Each is a pure
// function of model outputs and batch data returning a differentiable scalar.
//
// Averaging conventions:
//   rmim  mean squared error over every pixel of every patch that is both
//         masked and text-relevant, pooled across the batch
//   ifr   mean absolute error over all B x d entries
//   itc   (mean_i H(y_i2t, p_i2t) + mean_i H(y_t2i, p_t2i)) / 2
//   itm   mean two-way cross-entropy over all 3B rows
//   mlm   mean cross-entropy over all target tokens in the batch

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vlmae/model.hpp"
#include "vlmae/rng.hpp"
#include "vlmae/tensor.hpp"

namespace vlmae::losses {

struct RmimResult {
  Tensor loss;
  std::size_t selected_patches = 0;
  std::vector<std::uint8_t> empty;  // per sample: no masked patch inside the region
};

// predicted and target: [B, N, D] (or [N, D] for a single sample).
// region_mask: B*N flags. Per-patch target normalisation (mean 0, variance 1
// over each patch's pixels) is off by default.
RmimResult rmim_loss(const Tensor& predicted, const Tensor& target, const std::vector<MaskPlan>& plans,
                     std::span<const std::uint8_t> region_mask, bool normalize_targets = false);

// L1 between the visible-only online [CLS] and the shadow's full-image [CLS],
// both [B, d]. The shadow side must not require gradients.
Tensor ifr_loss(const Tensor& online_cls, const Tensor& shadow_cls);

struct ItcOptions {
  double distill_weight = 0.4;  // lambda
  bool normalize = true;        // L2-normalise projected embeddings first
  std::size_t min_batch = 2;
};

struct ItcResult {
  Tensor loss;
  Tensor logits_i2t;  // [B, B], s(I_i, T_j) / tau
  Tensor logits_t2i;  // [B, B], s(T_i, I_j) / tau
  Tensor target_i2t;  // [B, B] soft targets, rows sum to 1
  Tensor target_t2i;
};

// image_proj = phi_v(v_cls), text_proj = phi_w(w_cls) from the online model;
// shadow_* are the momentum projections of the momentum [CLS] outputs. tau is
// a scalar tensor. ConfigError when B < min_batch.
ItcResult itc_loss(const Tensor& image_proj, const Tensor& text_proj, const Tensor& shadow_image_proj,
                   const Tensor& shadow_text_proj, const Tensor& tau, const ItcOptions& options = {});

// y = (1 - lambda) one-hot(i) + lambda softmax(shadow_logits[i, :]).
Tensor soft_targets(const Tensor& shadow_logits, double distill_weight);

struct ItmNegatives {
  std::vector<std::size_t> text_for_image;  // hard negative caption per image
  std::vector<std::size_t> image_for_text;  // hard negative image per caption
};

// Samples one in-batch negative per direction with probability proportional
// to softmax similarity, never the positive. DataError when B < 2.
ItmNegatives mine_itm_negatives(const Tensor& logits_i2t, const Tensor& logits_t2i, Rng& rng);

// logits [R, 2]; labels 1 = matched.
Tensor itm_loss(const Tensor& logits, std::span<const std::size_t> labels);

struct MlmResult {
  Tensor loss;
  std::size_t targets = 0;
};

// token_logits [R, V]; positions index rows of token_logits. No targets gives
// a zero loss. A position outside [0, R) is a ContractError.
MlmResult mlm_loss(const Tensor& token_logits, std::span<const std::size_t> positions,
                   std::span<const std::size_t> target_ids);

struct Objectives {
  bool rmim = true, ifr = true, itc = true, itm = true, mlm = true;

  static Objectives all() { return {}; }
  static Objectives baseline() { return {false, false, true, true, true}; }
  // Comma-separated subset of "rmim,ifr,itc,itm,mlm"; ConfigError on unknown
  // names or when itc, itm or mlm is missing.
  static Objectives parse(const std::string& list);
  std::string to_string() const;
  void validate() const;
  bool operator==(const Objectives&) const = default;
};

struct LossDiagnostics {
  std::size_t rmim_patches = 0;
  std::size_t rmim_empty_samples = 0;
  std::size_t mlm_targets = 0;
  std::size_t itm_negatives = 0;
};

struct LossBundle {
  Tensor rmim, ifr, itc, itm, mlm;  // undefined when the objective is off
  Tensor total;
  LossDiagnostics diagnostics;

  double value(const Tensor& t) const { return t.defined() ? t.item() : 0.0; }
};

// total = sum of the defined components, unit weights. NumericError naming the
// first non-finite component.
Tensor total_loss(LossBundle& bundle);

}  // namespace vlmae::losses
