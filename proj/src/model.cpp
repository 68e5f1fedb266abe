// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vlmae/errors.hpp"
#include "vlmae/ops.hpp"

namespace vlmae {

namespace {

struct Builder {
  ParamRegistry& registry;
  Rng& rng;
  double std;
  double eps;
  bool trainable;

  Linear linear(const std::string& name, std::size_t in, std::size_t out) {
    return Linear{registry.add_normal(name + ".weight", {in, out}, std, rng, trainable),
                  registry.add(name + ".bias", {out}, 0.0, false, trainable)};
  }

  Norm norm(const std::string& name, std::size_t d) {
    return Norm{registry.add(name + ".gain", {d}, 1.0, true, trainable),
                registry.add(name + ".bias", {d}, 0.0, false, trainable), eps};
  }

  AttentionLayer attention(const std::string& name, std::size_t d, std::size_t heads) {
    return AttentionLayer{linear(name + ".query", d, d), linear(name + ".key", d, d), linear(name + ".value", d, d),
                          linear(name + ".out", d, d), heads};
  }

  EncoderBlock encoder_block(const std::string& name, std::size_t d, std::size_t heads, std::size_t ratio) {
    EncoderBlock b;
    b.ln1 = norm(name + ".ln1", d);
    b.attn = attention(name + ".attn", d, heads);
    b.ln2 = norm(name + ".ln2", d);
    b.fc1 = linear(name + ".fc1", d, ratio * d);
    b.fc2 = linear(name + ".fc2", ratio * d, d);
    return b;
  }

  FusionBlock fusion_block(const std::string& name, std::size_t d, std::size_t heads, std::size_t ratio) {
    FusionBlock b;
    b.ln1 = norm(name + ".ln1", d);
    b.self_attn = attention(name + ".self_attn", d, heads);
    b.ln_cross = norm(name + ".ln_cross", d);
    b.cross_attn = attention(name + ".cross_attn", d, heads);
    b.ln2 = norm(name + ".ln2", d);
    b.fc1 = linear(name + ".fc1", d, ratio * d);
    b.fc2 = linear(name + ".fc2", ratio * d, d);
    return b;
  }

  ImageEncoder image_encoder(const ModelConfig& c) {
    ImageEncoder e;
    const std::size_t d = c.d_model;
    e.patch_embed = linear("image.patch_embed", c.patch_dim(), d);
    e.cls_token = registry.add_normal("image.cls_token", {1, d}, std, rng, trainable);
    e.pos_cls = registry.add_normal("image.pos_cls", {1, d}, std, rng, trainable);
    e.pos_patch = registry.add_normal("image.pos_patch", {c.num_patches(), d}, std, rng, trainable);
    for (std::size_t i = 0; i < c.image_encoder_layers; ++i) {
      e.blocks.push_back(encoder_block("image.blocks." + std::to_string(i), d, c.heads, c.mlp_ratio));
    }
    e.norm = norm("image.norm", d);
    return e;
  }

  TextEncoder text_encoder(const ModelConfig& c) {
    TextEncoder e;
    const std::size_t d = c.d_model;
    e.token_embed = registry.add_normal("text.token_embed", {c.vocab_size, d}, std, rng, trainable);
    e.pos_embed = registry.add_normal("text.pos_embed", {c.max_tokens, d}, std, rng, trainable);
    for (std::size_t i = 0; i < c.text_encoder_layers; ++i) {
      e.blocks.push_back(encoder_block("text.blocks." + std::to_string(i), d, c.heads, c.mlp_ratio));
    }
    e.norm = norm("text.norm", d);
    e.vocab_size = c.vocab_size;
    return e;
  }
};

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

std::size_t ModelConfig::masked_count() const {
  return static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(num_patches())));
}

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of patch_size " +
                      std::to_string(patch_size));
  }
  if (channels == 0 || d_model == 0 || decoder_dim == 0 || mlp_ratio == 0 || proj_dim == 0 || vocab_size < 4 ||
      max_tokens == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (heads == 0 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
    throw ConfigError("decoder_dim must be divisible by decoder_heads");
  }
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("mask_ratio must be in [0, 1), got " + std::to_string(mask_ratio));
  }
  if (masked_count() >= num_patches()) throw ConfigError("mask_ratio would mask every patch");
  if (!(tau_min > 0.0 && tau_min <= tau_init && tau_init <= tau_max)) {
    throw ConfigError("temperature bounds must satisfy 0 < tau_min <= tau_init <= tau_max");
  }
  if (!(init_std > 0.0) || !(layernorm_eps > 0.0)) throw ConfigError("init_std and layernorm_eps must be positive");
}

ModelConfig ModelConfig::paper_preset() {
  ModelConfig c;
  c.image_size = 256;
  c.patch_size = 16;
  c.channels = 3;
  c.d_model = 768;
  c.image_encoder_layers = 12;
  c.text_encoder_layers = 6;
  c.fusion_layers = 6;
  c.decoder_layers = 4;
  c.decoder_dim = 512;
  c.heads = 12;
  c.decoder_heads = 8;
  c.mlp_ratio = 4;
  c.vocab_size = 30522;
  c.max_tokens = 30;
  c.mask_ratio = 0.5;
  c.proj_dim = 256;
  return c;
}

MaskPlan sample_mask_plan(Rng& rng, std::size_t num_patches, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in [0, 1), got " + std::to_string(ratio));
  const auto masked = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(num_patches)));
  if (masked >= num_patches) throw ConfigError("mask ratio would mask every patch");
  std::vector<std::size_t> perm = iota_vec(num_patches);
  rng.shuffle(perm);
  MaskPlan plan;
  plan.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(masked));
  plan.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(masked), perm.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

MaskPlan full_plan(std::size_t num_patches) { return MaskPlan{iota_vec(num_patches), {}}; }

Tensor ParamRegistry::add(const std::string& name, Shape shape, double value, bool decay, bool trainable) {
  if (find(name)) throw ContractError("parameter registered twice: " + name);
  Tensor t = Tensor::full(std::move(shape), value, trainable);
  params_.push_back(ParamRef{name, t, decay});
  return t;
}

Tensor ParamRegistry::add_normal(const std::string& name, Shape shape, double std, Rng& rng, bool trainable) {
  Tensor t = add(name, std::move(shape), 0.0, true, trainable);
  // Truncated at two standard deviations.
  for (double& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = z * std;
  }
  return t;
}

std::size_t ParamRegistry::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

const ParamRef* ParamRegistry::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Tensor Norm::operator()(const Tensor& x) const { return layernorm(x, gain, bias, eps); }

Tensor AttentionLayer::operator()(const Tensor& x_q, const Tensor& x_kv, std::span<const std::uint8_t> key_valid,
                                  std::vector<double>* probs) const {
  Tensor q = query(x_q);
  Tensor k = key(x_kv);
  Tensor v = value(x_kv);
  return out(attention(q, k, v, key_valid, heads, probs));
}

Tensor EncoderBlock::operator()(const Tensor& x, std::span<const std::uint8_t> key_valid,
                                std::vector<double>* probs) const {
  Tensor h = ln1(x);
  Tensor y = add(x, attn(h, h, key_valid, probs));
  return add(y, fc2(gelu(fc1(ln2(y)))));
}

Tensor FusionBlock::operator()(const Tensor& text, std::span<const std::uint8_t> text_valid,
                               const Tensor& image) const {
  Tensor h = ln1(text);
  Tensor x = add(text, self_attn(h, h, text_valid));
  x = add(x, cross_attn(ln_cross(x), image, {}));
  return add(x, fc2(gelu(fc1(ln2(x)))));
}

Tensor ImageEncoder::operator()(const Tensor& patches, const std::vector<MaskPlan>* plans,
                                AttentionTrace* trace) const {
  if (patches.rank() != 3) throw DimensionError("image encoder expects [B, N, P*P*C], got " + to_string(patches.shape()));
  const std::size_t batch = patches.dim(0);
  const std::size_t n = patches.dim(1);
  const std::size_t d = pos_patch.dim(1);
  if (n != pos_patch.dim(0)) {
    throw DimensionError("image encoder built for " + std::to_string(pos_patch.dim(0)) + " patches, got " +
                         std::to_string(n));
  }
  Tensor x = add(patch_embed(patches), pos_patch);
  std::size_t visible = n;
  if (plans) {
    if (plans->size() != batch) throw DimensionError("one mask plan per image required");
    visible = plans->front().visible.size();
    std::vector<std::size_t> index;
    index.reserve(batch * visible);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& plan = (*plans)[b];
      if (plan.visible.size() != visible) throw DimensionError("mask plans in a batch must keep equal patch counts");
      for (std::size_t p : plan.visible) {
        if (p >= n) throw DimensionError("mask plan index " + std::to_string(p) + " out of range");
        index.push_back(b * n + p);
      }
    }
    x = reshape(take_rows(reshape(x, {batch * n, d}), index), {batch, visible, d});
  }
  const std::vector<std::size_t> zeros(batch, 0);
  Tensor cls = reshape(take_rows(add(cls_token, pos_cls), zeros), {batch, 1, d});
  const Tensor parts[] = {cls, x};
  x = concat(parts, 1);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const bool last = i + 1 == blocks.size();
    x = blocks[i](x, {}, last && trace ? &trace->probs : nullptr);
  }
  if (trace) {
    trace->batch = batch;
    trace->heads = blocks.empty() ? 0 : blocks.back().attn.heads;
    trace->seq = 1 + visible;
  }
  return norm(x);
}

Tensor TextEncoder::operator()(std::span<const std::size_t> ids, std::span<const std::uint8_t> valid,
                               std::size_t batch, std::size_t len) const {
  if (ids.size() != batch * len || valid.size() != batch * len) {
    throw DimensionError("text encoder: ids/valid do not match " + std::to_string(batch) + "x" + std::to_string(len));
  }
  if (len > pos_embed.dim(0)) {
    throw DimensionError("text encoder: sequence length " + std::to_string(len) + " exceeds L_max " +
                         std::to_string(pos_embed.dim(0)));
  }
  const std::size_t d = token_embed.dim(1);
  Tensor x = reshape(embedding(token_embed, ids), {batch, len, d});
  x = add(x, take_rows(pos_embed, iota_vec(len)));
  for (const auto& block : blocks) x = block(x, valid);
  return norm(x);
}

Tensor ImageDecoder::operator()(const Tensor& image_reps, const std::vector<MaskPlan>& plans,
                                const Tensor& text_reps, std::span<const std::uint8_t> text_valid,
                                bool detach_text) const {
  const std::size_t batch = image_reps.dim(0);
  const std::size_t img_len = image_reps.dim(1);  // 1 + visible
  const std::size_t n = num_patches;
  const std::size_t dd = mask_token.dim(1);
  const std::size_t text_len = text_reps.dim(1);
  if (plans.size() != batch) throw DimensionError("decoder: one mask plan per image required");

  Tensor img = reshape(embed_image(image_reps), {batch * img_len, dd});
  const Tensor pool_parts[] = {img, mask_token};
  Tensor pool = concat(pool_parts, 0);
  const std::size_t mask_row = batch * img_len;
  std::vector<std::size_t> index;
  index.reserve(batch * (1 + n));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& plan = plans[b];
    if (plan.visible.size() + 1 != img_len) throw DimensionError("decoder: plan does not match image tokens");
    std::vector<std::size_t> slot(n, mask_row);
    for (std::size_t j = 0; j < plan.visible.size(); ++j) slot[plan.visible[j]] = b * img_len + 1 + j;
    index.push_back(b * img_len);
    index.insert(index.end(), slot.begin(), slot.end());
  }
  Tensor seq_img = add(reshape(take_rows(pool, index), {batch, 1 + n, dd}), pos_embed);
  Tensor seq_txt = embed_text(detach_text ? text_reps.detach() : text_reps);
  const Tensor seq_parts[] = {seq_img, seq_txt};
  Tensor x = concat(seq_parts, 1);

  const std::size_t total = 1 + n + text_len;
  std::vector<std::uint8_t> valid(batch * total, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(text_valid.data() + b * text_len, text_len, valid.data() + b * total + 1 + n);
  }
  for (const auto& block : blocks) x = block(x, valid);
  x = norm(x);

  std::vector<std::size_t> out_index;
  out_index.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < n; ++p) out_index.push_back(b * total + 1 + p);
  }
  Tensor patches = take_rows(reshape(x, {batch * total, dd}), out_index);
  Tensor pixels = pixel_head(patches);
  return reshape(pixels, {batch, n, pixels.dim(1)});
}

Tensor FusionLearner::operator()(const Tensor& text, std::span<const std::uint8_t> text_valid,
                                 const Tensor& image) const {
  if (text.dim(0) != image.dim(0)) throw DimensionError("fusion: text and image batch sizes differ");
  Tensor x = text;
  for (const auto& block : blocks) x = block(x, text_valid, image);
  return norm(x);
}

VlmaeModel::VlmaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  Builder b{registry_, rng, config_.init_std, config_.layernorm_eps, true};
  const std::size_t d = config_.d_model;
  const std::size_t dd = config_.decoder_dim;

  image = b.image_encoder(config_);
  text = b.text_encoder(config_);

  decoder.embed_image = b.linear("decoder.embed_image", d, dd);
  decoder.embed_text = b.linear("decoder.embed_text", d, dd);
  decoder.mask_token = registry_.add_normal("decoder.mask_token", {1, dd}, config_.init_std, rng, true);
  decoder.pos_embed = registry_.add_normal("decoder.pos_embed", {1 + config_.num_patches(), dd}, config_.init_std, rng, true);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
    decoder.blocks.push_back(
        b.encoder_block("decoder.blocks." + std::to_string(i), dd, config_.decoder_heads, config_.mlp_ratio));
  }
  decoder.norm = b.norm("decoder.norm", dd);
  decoder.pixel_head = b.linear("decoder.pixel_head", dd, config_.patch_dim());
  decoder.num_patches = config_.num_patches();

  for (std::size_t i = 0; i < config_.fusion_layers; ++i) {
    fusion.blocks.push_back(b.fusion_block("fusion.blocks." + std::to_string(i), d, config_.heads, config_.mlp_ratio));
  }
  fusion.norm = b.norm("fusion.norm", d);

  proj_image = b.linear("proj_image", d, config_.proj_dim);
  proj_text = b.linear("proj_text", d, config_.proj_dim);
  itm_head = b.linear("itm_head", d, 2);
  mlm_head = b.linear("mlm_head", d, config_.vocab_size);
  log_tau = registry_.add("log_tau", {}, std::log(config_.tau_init), false, true);
}

double VlmaeModel::temperature() const { return std::exp(log_tau.item()); }

void VlmaeModel::clamp_temperature() {
  double& v = log_tau.data()[0];
  v = std::clamp(v, std::log(config_.tau_min), std::log(config_.tau_max));
}

MomentumShadow::MomentumShadow(const VlmaeModel& online) {
  const ModelConfig& c = online.config();
  Rng rng(0);
  Builder b{registry_, rng, c.init_std, c.layernorm_eps, false};
  image = b.image_encoder(c);
  text = b.text_encoder(c);
  proj_image = b.linear("proj_image", c.d_model, c.proj_dim);
  proj_text = b.linear("proj_text", c.d_model, c.proj_dim);
  for (auto& p : registry_.params()) {
    const ParamRef* src = online.registry().find(p.name);
    if (!src || src->tensor.shape() != p.tensor.shape()) {
      throw ContractError("momentum shadow: no online counterpart for " + p.name);
    }
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), p.tensor.data().begin());
    online_.push_back(src->tensor);
  }
}

void ema_update(std::span<Tensor> shadow, std::span<const Tensor> online, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ContractError("momentum must be in [0, 1], got " + std::to_string(m));
  if (shadow.size() != online.size()) throw ContractError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].shape() != online[i].shape()) {
      throw ContractError("ema_update: shape " + to_string(shadow[i].shape()) + " vs " + to_string(online[i].shape()));
    }
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    auto s = shadow[i].data();
    auto o = online[i].data();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = m * s[j] + (1.0 - m) * o[j];
  }
}

void ema_update(MomentumShadow& shadow, double m) {
  std::vector<Tensor> targets;
  for (auto& p : shadow.registry().params()) targets.push_back(p.tensor);
  ema_update(std::span<Tensor>(targets), std::span<const Tensor>(shadow.online_pairs()), m);
}

std::vector<std::vector<double>> cls_attention_profile(const VlmaeModel& model, const Tensor& patches) {
  NoGradGuard no_grad;
  Tensor input = patches.rank() == 2 ? reshape(patches, {1, patches.dim(0), patches.dim(1)}) : patches;
  AttentionTrace trace;
  model.image(input, nullptr, &trace);
  const std::size_t n = trace.seq - 1;
  std::vector<std::vector<double>> out(trace.batch, std::vector<double>(n, 0.0));
  for (std::size_t b = 0; b < trace.batch; ++b) {
    auto& w = out[b];
    for (std::size_t h = 0; h < trace.heads; ++h) {
      const double* row = trace.probs.data() + (b * trace.heads + h) * trace.seq * trace.seq;  // query 0 = [CLS]
      for (std::size_t p = 0; p < n; ++p) w[p] += row[1 + p] / static_cast<double>(trace.heads);
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& v : w) v /= total;
  }
  return out;
}

std::size_t analytic_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t dd = c.decoder_dim;
  const std::size_t n = c.num_patches();
  const std::size_t pd = c.patch_dim();
  const std::size_t r = c.mlp_ratio;
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto attn = [&](std::size_t w) { return 4 * linear(w, w); };
  auto block = [&](std::size_t w) { return 2 * (2 * w) + attn(w) + linear(w, r * w) + linear(r * w, w); };
  auto fusion_block = [&](std::size_t w) { return block(w) + 2 * w + attn(w); };

  const std::size_t image = linear(pd, d) + 2 * d + n * d + c.image_encoder_layers * block(d) + 2 * d;
  const std::size_t text = c.vocab_size * d + c.max_tokens * d + c.text_encoder_layers * block(d) + 2 * d;
  const std::size_t decoder =
      2 * linear(d, dd) + dd + (1 + n) * dd + c.decoder_layers * block(dd) + 2 * dd + linear(dd, pd);
  const std::size_t fusion = c.fusion_layers * fusion_block(d) + 2 * d;
  const std::size_t heads = 2 * linear(d, c.proj_dim) + linear(d, 2) + linear(d, c.vocab_size) + 1;
  return image + text + decoder + fusion + heads;
}

}  // namespace vlmae
