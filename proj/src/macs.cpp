// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/macs.hpp"

#include <cmath>

#include "vlmae/errors.hpp"

namespace vlmae {

namespace {

double block_macs(double s, double d, double r) { return attention_macs(s, d) + mlp_macs(s, d, r); }

MacsReport count_once(const ModelConfig& c, double alpha, std::size_t batch) {
  ModelConfig cfg = c;
  cfg.mask_ratio = alpha;
  cfg.validate();
  const double n = static_cast<double>(cfg.num_patches());
  const double m = static_cast<double>(cfg.masked_count());
  const double d = static_cast<double>(cfg.d_model);
  const double dd = static_cast<double>(cfg.decoder_dim);
  const double r = static_cast<double>(cfg.mlp_ratio);
  const double l = static_cast<double>(cfg.max_tokens);
  const double b = static_cast<double>(batch);
  const double s_vis = 1.0 + n - m;
  const double s_full = 1.0 + n;

  MacsReport rep;
  rep.mask_ratio = alpha;
  rep.batch = batch;
  auto add = [&](const char* name, std::size_t passes, double tokens, double per_pass) {
    rep.entries.push_back({name, passes, static_cast<std::size_t>(tokens), b * static_cast<double>(passes) * per_pass});
  };
  const double img_layers = static_cast<double>(cfg.image_encoder_layers);
  add("image_encoder", 1, s_vis, img_layers * block_macs(s_vis, d, r));
  add("momentum_image_encoder", 1, s_full, img_layers * block_macs(s_full, d, r));
  add("text_encoder", 3, l, static_cast<double>(cfg.text_encoder_layers) * block_macs(l, d, r));
  const double s_dec = 1.0 + n + l;
  add("decoder", 1, s_dec, static_cast<double>(cfg.decoder_layers) * block_macs(s_dec, dd, r));
  add("fusion", 4, l,
      static_cast<double>(cfg.fusion_layers) * (block_macs(l, d, r) + cross_attention_macs(l, s_vis, d)));
  for (const auto& e : rep.entries) rep.total += e.macs;
  return rep;
}

}  // namespace

const MacsEntry& MacsReport::entry(const std::string& component) const {
  for (const auto& e : entries) {
    if (e.component == component) return e;
  }
  throw ContractError("no MACs entry named " + component);
}

double attention_macs(double s, double d) { return 4.0 * s * d * d + 2.0 * s * s * d; }

double mlp_macs(double s, double d, double r) { return 2.0 * s * d * (r * d); }

double cross_attention_macs(double sq, double sk, double d) { return 2.0 * sq * d * d + 2.0 * sk * d * d + 2.0 * sq * sk * d; }

MacsReport count_macs(const ModelConfig& config, double mask_ratio, std::size_t batch) {
  MacsReport rep = count_once(config, mask_ratio, batch);
  const MacsReport dense = count_once(config, 0.0, batch);
  rep.ratio_vs_dense = rep.total / dense.total;
  return rep;
}

}  // namespace vlmae
