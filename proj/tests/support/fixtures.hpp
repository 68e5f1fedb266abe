// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small configurations that keep unit tests fast.

#pragma once

#include <cstdint>

#include "vlmae/config.hpp"

namespace vlmae::testing {

// 16x16 images in 4x4 patches (N = 16), one layer per stack, width 16.
inline RunConfig tiny_config(std::uint64_t seed = 0) {
  RunConfig c;
  c.model.image_size = 16;
  c.model.patch_size = 4;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.image_encoder_layers = 1;
  c.model.text_encoder_layers = 1;
  c.model.fusion_layers = 1;
  c.model.decoder_layers = 1;
  c.model.decoder_dim = 8;
  c.model.decoder_heads = 2;
  c.model.proj_dim = 8;
  c.data.image_size = 16;
  c.data.grid_cells = 2;
  c.data.min_objects = 1;
  c.data.max_objects = 3;
  c.data.train_pairs = 16;
  c.data.held_out_pairs = 4;
  c.train.batch_size = 4;
  c.train.epochs = 1;
  c.train.warmup_iters = 2;
  c.train.seed = seed;
  return c;
}

}  // namespace vlmae::testing
