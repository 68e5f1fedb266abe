// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Image encoder (with random patch masking), text encoder, image decoder,
// fusion learner, projection heads and the momentum shadow.
//
// All stacks are pre-LayerNorm transformer blocks with GELU MLPs:
//   x = x + Attn(LN(x));  x = x + FC2(GELU(FC1(LN(x))))
// Fusion blocks add a cross-attention sub-layer (text queries, image keys and
// values) between self-attention and the MLP.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vlmae/rng.hpp"
#include "vlmae/tensor.hpp"

namespace vlmae {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t d_model = 128;
  std::size_t image_encoder_layers = 4;
  std::size_t text_encoder_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t decoder_dim = 64;
  std::size_t heads = 4;
  std::size_t decoder_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = 17;
  std::size_t max_tokens = 16;
  double mask_ratio = 0.5;
  std::size_t proj_dim = 64;
  double init_std = 0.02;
  double tau_init = 0.07;
  double tau_min = 1e-3;
  double tau_max = 1.0;
  double layernorm_eps = 1e-6;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  // M = round(mask_ratio * N).
  std::size_t masked_count() const;
  void validate() const;

  // Full-size shapes (ViT-B/16 image encoder, 6+6 BERT-base text/fusion
  // layers, 4-layer 512-wide decoder) for compute accounting.
  static ModelConfig paper_preset();
};

// Per-sample partition of patch indices; both lists sorted ascending.
struct MaskPlan {
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
};

// ConfigError unless 0 <= ratio < 1 and round(ratio * N) < N.
MaskPlan sample_mask_plan(Rng& rng, std::size_t num_patches, double ratio);
MaskPlan full_plan(std::size_t num_patches);

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for biases and the temperature
};

class ParamRegistry {
 public:
  Tensor add(const std::string& name, Shape shape, double value, bool decay, bool trainable);
  Tensor add_normal(const std::string& name, Shape shape, double std, Rng& rng, bool trainable);
  const std::vector<ParamRef>& params() const { return params_; }
  std::vector<ParamRef>& params() { return params_; }
  std::size_t count() const;
  const ParamRef* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<ParamRef> params_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const;
};

struct Norm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-6;
  Tensor operator()(const Tensor& x) const;
};

struct AttentionLayer {
  Linear query, key, value, out;
  std::size_t heads = 1;
  Tensor operator()(const Tensor& x_q, const Tensor& x_kv, std::span<const std::uint8_t> key_valid,
                    std::vector<double>* probs = nullptr) const;
};

struct EncoderBlock {
  Norm ln1;
  AttentionLayer attn;
  Norm ln2;
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x, std::span<const std::uint8_t> key_valid, std::vector<double>* probs = nullptr) const;
};

struct FusionBlock {
  Norm ln1;
  AttentionLayer self_attn;
  Norm ln_cross;
  AttentionLayer cross_attn;
  Norm ln2;
  Linear fc1, fc2;
  Tensor operator()(const Tensor& text, std::span<const std::uint8_t> text_valid, const Tensor& image) const;
};

// Last-layer attention weights [B, heads, S, S] of the image encoder.
struct AttentionTrace {
  std::vector<double> probs;
  std::size_t batch = 0, heads = 0, seq = 0;
};

struct ImageEncoder {
  Linear patch_embed;
  Tensor cls_token;  // [1, d]
  Tensor pos_cls;    // [1, d]
  Tensor pos_patch;  // [N, d]
  std::vector<EncoderBlock> blocks;
  Norm norm;

  // patches [B, N, P*P*C] -> [B, 1 + |visible|, d]. Positional embeddings are
  // added by original patch index before the visible patches are gathered.
  // plans == nullptr encodes every patch.
  Tensor operator()(const Tensor& patches, const std::vector<MaskPlan>* plans, AttentionTrace* trace = nullptr) const;
};

struct TextEncoder {
  Tensor token_embed;  // [V, d]
  Tensor pos_embed;    // [L_max, d]
  std::vector<EncoderBlock> blocks;
  Norm norm;
  std::size_t vocab_size = 0;

  // ids, valid: B x L row-major -> [B, L, d]; [PAD] keys are masked out.
  Tensor operator()(std::span<const std::size_t> ids, std::span<const std::uint8_t> valid, std::size_t batch,
                    std::size_t len) const;
};

struct ImageDecoder {
  Linear embed_image;  // d -> decoder_dim
  Linear embed_text;   // d -> decoder_dim
  Tensor mask_token;   // [1, decoder_dim]
  Tensor pos_embed;    // [1 + N, decoder_dim]; slot 0 is the image [CLS]
  std::vector<EncoderBlock> blocks;
  Norm norm;
  Linear pixel_head;  // decoder_dim -> P*P*C
  std::size_t num_patches = 0;

  // Sequence: [image CLS, N image slots (visible tokens at their patch index,
  // mask token elsewhere), text tokens]. Returns [B, N, P*P*C].
  Tensor operator()(const Tensor& image_reps, const std::vector<MaskPlan>& plans, const Tensor& text_reps,
                    std::span<const std::uint8_t> text_valid, bool detach_text = false) const;
};

struct FusionLearner {
  std::vector<FusionBlock> blocks;
  Norm norm;
  // text [B, L, d] attends to image [B, S, d]; returns fused [B, L, d]
  // (position 0 is the fused [CLS]).
  Tensor operator()(const Tensor& text, std::span<const std::uint8_t> text_valid, const Tensor& image) const;
};

class VlmaeModel {
 public:
  VlmaeModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  double temperature() const;
  void clamp_temperature();

  ImageEncoder image;
  TextEncoder text;
  ImageDecoder decoder;
  FusionLearner fusion;
  Linear proj_image;  // phi_v
  Linear proj_text;   // phi_w
  Linear itm_head;    // d -> 2, class 1 = matched
  Linear mlm_head;    // d -> V
  Tensor log_tau;     // scalar

 private:
  ModelConfig config_;
  ParamRegistry registry_;
};

// EMA copies of the image encoder, text encoder and both projections. Never
// receives gradients.
class MomentumShadow {
 public:
  explicit MomentumShadow(const VlmaeModel& online);

  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  // Online tensor paired with each shadow parameter, in registry order.
  const std::vector<Tensor>& online_pairs() const { return online_; }

  ImageEncoder image;
  TextEncoder text;
  Linear proj_image;
  Linear proj_text;

 private:
  ParamRegistry registry_;
  std::vector<Tensor> online_;
};

// shadow := m * shadow + (1 - m) * online, elementwise. ContractError when
// m is outside [0, 1] or a shape disagrees.
void ema_update(MomentumShadow& shadow, double m);
void ema_update(std::span<Tensor> shadow, std::span<const Tensor> online, double m);

// Last-layer [CLS] -> patch attention of the online image encoder on full
// images, averaged over heads and renormalised over the N patch keys.
// patches: [B, N, P*P*C] or [N, P*P*C]. Returns B vectors of length N.
std::vector<std::vector<double>> cls_attention_profile(const VlmaeModel& model, const Tensor& patches);

// Closed-form parameter count of a model built from config (see README).
std::size_t analytic_parameter_count(const ModelConfig& config);

}  // namespace vlmae
