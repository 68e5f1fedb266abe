// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Analytic multiply-accumulate counts of one training forward pass.
//
// Per transformer block over S tokens of width d with MLP ratio r:
//   self-attention  4 S d^2 + 2 S^2 d
//   MLP             2 S d (r d)
// A fusion block adds cross-attention from Sq text tokens to Sk image tokens:
//   2 Sq d^2 + 2 Sk d^2 + 2 Sq Sk d
// Embeddings, norms, softmax and output heads are not counted.
//
// One training forward per sample runs: the online image encoder on the 1 + N
// - M visible tokens, the momentum image encoder on 1 + N tokens, the text
// encoder three times (clean, corrupted, momentum) on L_max tokens, the
// decoder on 1 + N + L_max tokens and the fusion learner four times
// (positive, two hard negatives, corrupted text) against the visible tokens.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vlmae/model.hpp"

namespace vlmae {

struct MacsEntry {
  std::string component;
  std::size_t passes = 1;
  std::size_t tokens = 0;  // sequence length of one pass
  double macs = 0.0;       // all passes, whole batch
};

struct MacsReport {
  double mask_ratio = 0.0;
  std::size_t batch = 1;
  std::vector<MacsEntry> entries;
  double total = 0.0;
  double ratio_vs_dense = 1.0;  // total / total at mask_ratio 0

  const MacsEntry& entry(const std::string& component) const;
};

double attention_macs(double tokens, double width);
double mlp_macs(double tokens, double width, double ratio);
double cross_attention_macs(double query_tokens, double key_tokens, double width);

// ConfigError for an invalid config or ratio.
MacsReport count_macs(const ModelConfig& config, double mask_ratio, std::size_t batch = 1);

}  // namespace vlmae
