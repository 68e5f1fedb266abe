// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "vlmae/errors.hpp"
#include "vlmae/ops.hpp"

namespace vlmae {

namespace {

constexpr std::uint64_t kStreamModel = 10;
constexpr std::uint64_t kStreamStep = 11;
constexpr std::uint64_t kStreamShuffle = 12;

Tensor first_token(const Tensor& seq) {
  const std::size_t b = seq.dim(0);
  const std::size_t s = seq.dim(1);
  const std::size_t d = seq.dim(2);
  std::vector<std::size_t> idx(b);
  for (std::size_t i = 0; i < b; ++i) idx[i] = i * s;
  return take_rows(reshape(seq, {b * s, d}), idx);
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

// Keeps the first `lines` lines of a log file and drops the rest.
void truncate_lines(const std::string& path, std::size_t lines) {
  std::ifstream in(path);
  std::vector<std::string> kept;
  std::string line;
  while (kept.size() < lines && std::getline(in, line)) kept.push_back(line);
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

StepRandomness sample_step_randomness(const data::Batch& batch, double mask_ratio, const data::Vocabulary& vocab,
                                      Rng& rng) {
  StepRandomness r;
  for (std::size_t b = 0; b < batch.size; ++b) r.plans.push_back(sample_mask_plan(rng, batch.num_patches, mask_ratio));
  const std::span<const std::size_t> ids(batch.token_ids);
  for (std::size_t b = 0; b < batch.size; ++b) {
    r.mlm.push_back(data::mlm_corrupt(ids.subspan(b * batch.seq_len, batch.seq_len), vocab, rng));
  }
  return r;
}

LossOptions LossOptions::from(const TrainConfig& train) {
  LossOptions o;
  o.objectives = losses::Objectives::parse(train.objectives);
  o.itc.distill_weight = train.distill_weight;
  o.itc.normalize = train.normalize_itc;
  o.rmim_normalize_targets = train.rmim_normalize_targets;
  o.detach_decoder_text = train.detach_decoder_text;
  return o;
}

losses::LossBundle compute_losses(const VlmaeModel& model, const MomentumShadow& shadow, const data::Batch& batch,
                                  StepRandomness& randomness, Rng& rng, const LossOptions& options) {
  const std::size_t bsz = batch.size;
  const std::size_t len = batch.seq_len;
  const auto& obj = options.objectives;
  if (randomness.plans.size() != bsz || randomness.mlm.size() != bsz) {
    throw ContractError("step randomness does not match the batch size");
  }
  losses::LossBundle bundle;

  // Online image encoder on visible patches; text encoder on clean and
  // corrupted captions in one pass.
  Tensor img = model.image(batch.patches, &randomness.plans);
  std::vector<std::size_t> ids2(batch.token_ids);
  std::vector<std::uint8_t> valid2(batch.token_valid);
  for (std::size_t b = 0; b < bsz; ++b) ids2.insert(ids2.end(), randomness.mlm[b].corrupted.begin(), randomness.mlm[b].corrupted.end());
  valid2.insert(valid2.end(), batch.token_valid.begin(), batch.token_valid.end());
  Tensor txt2 = model.text(ids2, valid2, 2 * bsz, len);
  Tensor txt = take_rows(txt2, range(0, bsz));
  Tensor txt_mlm = take_rows(txt2, range(bsz, 2 * bsz));
  Tensor v_cls = first_token(img);
  Tensor w_cls = first_token(txt);

  if (obj.rmim) {
    Tensor pred = model.decoder(img, randomness.plans, txt, batch.token_valid, options.detach_decoder_text);
    auto r = losses::rmim_loss(pred, batch.patches, randomness.plans, batch.region_mask, options.rmim_normalize_targets);
    bundle.rmim = r.loss;
    bundle.diagnostics.rmim_patches = r.selected_patches;
    bundle.diagnostics.rmim_empty_samples = static_cast<std::size_t>(std::count(r.empty.begin(), r.empty.end(), 1));
  }

  Tensor vm_cls, wm_cls, pv_m, pw_m;
  {
    NoGradGuard no_grad;
    vm_cls = first_token(shadow.image(batch.patches, nullptr));
    wm_cls = first_token(shadow.text(batch.token_ids, batch.token_valid, bsz, len));
    pv_m = shadow.proj_image(vm_cls);
    pw_m = shadow.proj_text(wm_cls);
  }

  if (obj.ifr) bundle.ifr = losses::ifr_loss(v_cls, vm_cls);

  auto itc = losses::itc_loss(model.proj_image(v_cls), model.proj_text(w_cls), pv_m, pw_m, exp(model.log_tau),
                              options.itc);
  bundle.itc = itc.loss;
  if (!randomness.negatives) randomness.negatives = losses::mine_itm_negatives(itc.logits_i2t, itc.logits_t2i, rng);
  const auto& neg = *randomness.negatives;

  // One fusion pass over [positives; (image, hard text); (hard image, text);
  // (image, corrupted text)].
  std::vector<std::uint8_t> valid_all;
  valid_all.reserve(4 * bsz * len);
  auto push_valid = [&](std::size_t row) {
    valid_all.insert(valid_all.end(), batch.token_valid.begin() + row * len, batch.token_valid.begin() + (row + 1) * len);
  };
  for (std::size_t b = 0; b < bsz; ++b) push_valid(b);
  for (std::size_t b = 0; b < bsz; ++b) push_valid(neg.text_for_image[b]);
  for (std::size_t b = 0; b < bsz; ++b) push_valid(b);
  for (std::size_t b = 0; b < bsz; ++b) push_valid(b);
  const Tensor text_parts[] = {txt, take_rows(txt, neg.text_for_image), txt, txt_mlm};
  const Tensor image_parts[] = {img, img, take_rows(img, neg.image_for_text), img};
  Tensor fused = model.fusion(concat(text_parts, 0), valid_all, concat(image_parts, 0));
  const std::size_t d = fused.dim(2);
  Tensor flat = reshape(fused, {4 * bsz * len, d});

  std::vector<std::size_t> cls_rows(3 * bsz);
  for (std::size_t r = 0; r < 3 * bsz; ++r) cls_rows[r] = r * len;
  std::vector<std::size_t> itm_labels(3 * bsz, 0);
  std::fill_n(itm_labels.begin(), bsz, 1);
  bundle.itm = losses::itm_loss(model.itm_head(take_rows(flat, cls_rows)), itm_labels);
  bundle.diagnostics.itm_negatives = 2 * bsz;

  std::vector<std::size_t> mlm_rows, mlm_targets;
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t k = 0; k < randomness.mlm[b].positions.size(); ++k) {
      mlm_rows.push_back((3 * bsz + b) * len + randomness.mlm[b].positions[k]);
      mlm_targets.push_back(randomness.mlm[b].targets[k]);
    }
  }
  bundle.diagnostics.mlm_targets = mlm_rows.size();
  if (obj.mlm) {
    if (mlm_rows.empty()) {
      bundle.mlm = Tensor::scalar(0.0);
    } else {
      Tensor logits = model.mlm_head(take_rows(flat, mlm_rows));
      bundle.mlm = losses::mlm_loss(logits, range(0, mlm_rows.size()), mlm_targets).loss;
    }
  }

  losses::total_loss(bundle);
  return bundle;
}

std::string MetricsRecord::to_jsonl() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["tau"] = tau;
  j["grad_norm"] = grad_norm;
  j["loss"] = total;
  auto put = [&](const char* name, const std::optional<double>& v) {
    if (v) j[name] = *v;
  };
  put("rmim", rmim);
  put("ifr", ifr);
  put("itc", itc);
  put("itm", itm);
  put("mlm", mlm);
  if (rmim) {
    j["rmim_patches"] = diagnostics.rmim_patches;
    j["rmim_empty"] = diagnostics.rmim_empty_samples;
  }
  j["mlm_targets"] = diagnostics.mlm_targets;
  j["itm_negatives"] = diagnostics.itm_negatives;
  return j.dump();
}

Trainer::Trainer(const RunConfig& config) : Trainer(config, true) {}

Trainer::Trainer(const RunConfig& config, bool fresh_logs) : config_(config) {
  config_.validate();
  const std::uint64_t seed = config_.train.seed;
  dataset_ = data::Dataset::generate(config_.data, config_.model.patch_size, seed, vocab_);
  model_ = std::make_unique<VlmaeModel>(config_.model, derive_seed(seed, kStreamModel, 0));
  shadow_ = std::make_unique<MomentumShadow>(*model_);
  optim_ = AdamWState::for_params(model_->registry().params());
  loss_options_ = LossOptions::from(config_.train);
  rng_ = Rng(derive_seed(seed, kStreamStep, 0));
  if (fresh_logs) open_logs(true);
}

void Trainer::open_logs(bool fresh) {
  auto open = [&](std::ofstream& stream, const std::string& path) {
    if (path.empty()) return;
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    if (!fresh) truncate_lines(path, step_);
    stream.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!stream) throw IoError("cannot open log " + path);
  };
  open(metrics_, config_.train.metrics_path);
  open(timing_, config_.train.timing_path);
}

std::unique_ptr<Trainer> Trainer::resume(const std::string& checkpoint_dir, const std::optional<RunConfig>& override_config) {
  const CheckpointData data = read_checkpoint(checkpoint_dir);
  RunConfig saved;
  try {
    saved = RunConfig::from_json(data.config);
  } catch (const ConfigError& e) {
    throw CorruptionError("checkpoint config echo is invalid: " + std::string(e.what()));
  }
  const RunConfig& cfg = override_config ? *override_config : saved;
  std::unique_ptr<Trainer> t(new Trainer(cfg, false));
  if (override_config) t->warnings_ = config_echo_warnings(data.config, override_config->to_json());
  t->restore(data);
  t->open_logs(false);
  t->last_checkpoint_ = checkpoint_dir;
  return t;
}

void Trainer::restore(const CheckpointData& data) {
  auto& params = model_->registry().params();
  auto& shadow_params = shadow_->registry().params();
  auto lookup = [&](const std::string& group, const ParamRef& p) -> const CheckpointTensor& {
    const CheckpointTensor* t = data.find(group, p.name);
    if (!t) throw CorruptionError("checkpoint lacks " + group + " tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw ConfigError("checkpoint tensor " + group + "/" + p.name + " has shape " + to_string(t->shape) +
                        ", model expects " + to_string(p.tensor.shape()));
    }
    return *t;
  };
  // Resolve everything first so a failure leaves the trainer untouched.
  std::vector<const CheckpointTensor*> online, shadow, m, v;
  for (const auto& p : params) {
    online.push_back(&lookup("online", p));
    m.push_back(&lookup("adam_m", p));
    v.push_back(&lookup("adam_v", p));
  }
  for (const auto& p : shadow_params) shadow.push_back(&lookup("shadow", p));
  Rng rng;
  rng.set_state(data.rng_state);

  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(online[i]->values.begin(), online[i]->values.end(), params[i].tensor.data().begin());
    optim_.m[i] = m[i]->values;
    optim_.v[i] = v[i]->values;
  }
  for (std::size_t i = 0; i < shadow_params.size(); ++i) {
    std::copy(shadow[i]->values.begin(), shadow[i]->values.end(), shadow_params[i].tensor.data().begin());
  }
  optim_.step = data.optimizer_step;
  rng_ = rng;
  step_ = data.step;
}

void Trainer::save_checkpoint(const std::string& dir) {
  CheckpointData data;
  data.config = config_.to_json();
  data.step = step_;
  data.rng_state = rng_.state();
  data.optimizer_step = optim_.step;
  const auto& params = model_->registry().params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    data.tensors.push_back({p.name, "online", p.tensor.shape(), p.tensor.values()});
  }
  for (const auto& p : shadow_->registry().params()) {
    data.tensors.push_back({p.name, "shadow", p.tensor.shape(), p.tensor.values()});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    data.tensors.push_back({params[i].name, "adam_m", params[i].tensor.shape(), optim_.m[i]});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    data.tensors.push_back({params[i].name, "adam_v", params[i].tensor.shape(), optim_.v[i]});
  }
  write_checkpoint(dir, data);
  last_checkpoint_ = dir;
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t per_epoch = config_.steps_per_epoch();
  const std::size_t epoch = step / per_epoch;
  const std::size_t within = step % per_epoch;
  std::vector<std::size_t> order = range(0, dataset_.train.size());
  Rng shuffle(derive_seed(config_.train.seed, kStreamShuffle, epoch));
  shuffle.shuffle(order);
  const std::size_t bsz = config_.train.batch_size;
  const std::size_t lo = within * bsz;
  const std::size_t hi = std::min(lo + bsz, order.size());
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

data::Batch Trainer::batch_for_step(std::size_t step) const {
  std::vector<const data::PairRecord*> records;
  for (std::size_t i : batch_indices(step)) records.push_back(&dataset_.train[i]);
  return data::make_batch(std::span<const data::PairRecord* const>(records), config_.data, config_.model.patch_size,
                          vocab_);
}

MetricsRecord Trainer::step() { return step_on(batch_for_step(step_)); }

MetricsRecord Trainer::step_on(const data::Batch& batch) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tc = config_.train;
  MetricsRecord rec;
  rec.step = step_;
  rec.epoch = step_ / config_.steps_per_epoch();
  try {
    StepRandomness randomness = sample_step_randomness(batch, config_.model.mask_ratio, vocab_, rng_);
    losses::LossBundle bundle = compute_losses(*model_, *shadow_, batch, randomness, rng_, loss_options_);
    backward(bundle.total);
    if (phase_hook) phase_hook("backward");

    auto& params = model_->registry().params();
    rec.grad_norm = clip_grad_norm(params, tc.grad_clip);
    rec.lr = lr_at(step_, Schedule{tc.base_lr, tc.min_lr, tc.warmup_iters, config_.total_steps()});
    adamw_step(params, optim_, rec.lr, AdamWOptions{tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay});
    model_->clamp_temperature();
    if (phase_hook) phase_hook("optimizer");
    ema_update(*shadow_, tc.momentum);
    if (phase_hook) phase_hook("ema");
    model_->registry().zero_grad();

    rec.tau = model_->temperature();
    rec.total = bundle.total.item();
    auto opt = [](const Tensor& t) { return t.defined() ? std::optional<double>(t.item()) : std::nullopt; };
    rec.rmim = opt(bundle.rmim);
    rec.ifr = opt(bundle.ifr);
    rec.itc = opt(bundle.itc);
    rec.itm = opt(bundle.itm);
    rec.mlm = opt(bundle.mlm);
    rec.diagnostics = bundle.diagnostics;
  } catch (const NumericError& e) {
    tape().clear();
    model_->registry().zero_grad();
    const std::string where = last_checkpoint_.empty() ? "none" : last_checkpoint_;
    throw NumericError("step " + std::to_string(step_) + ": " + e.what() + " (last good checkpoint: " + where + ")");
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (metrics_.is_open()) metrics_ << rec.to_jsonl() << '\n' << std::flush;
  if (timing_.is_open()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", rec.wall_seconds);
    timing_ << "{\"step\":" << rec.step << ",\"wall_seconds\":" << buf << "}\n" << std::flush;
  }
  ++step_;
  if (!tc.checkpoint_dir.empty() && tc.checkpoint_every > 0 && step_ % tc.checkpoint_every == 0) {
    char name[32];
    std::snprintf(name, sizeof name, "step-%06zu", step_);
    save_checkpoint((std::filesystem::path(tc.checkpoint_dir) / name).string());
  }
  return rec;
}

void Trainer::run(std::size_t max_steps, const std::function<void(const MetricsRecord&)>& on_step) {
  for (std::size_t i = 0; i < max_steps && !done(); ++i) {
    const MetricsRecord rec = step();
    if (on_step) on_step(rec);
  }
  if (done() && !config_.train.checkpoint_dir.empty()) {
    save_checkpoint((std::filesystem::path(config_.train.checkpoint_dir) / "final").string());
  }
}

}  // namespace vlmae
