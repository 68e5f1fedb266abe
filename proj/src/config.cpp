// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "vlmae/errors.hpp"
#include "vlmae/losses.hpp"

namespace vlmae {

using nlohmann::json;

namespace {

template <typename C, typename V>
void visit_model(C& c, V&& v) {
  v("image_size", c.image_size);
  v("patch_size", c.patch_size);
  v("channels", c.channels);
  v("d_model", c.d_model);
  v("image_encoder_layers", c.image_encoder_layers);
  v("text_encoder_layers", c.text_encoder_layers);
  v("fusion_layers", c.fusion_layers);
  v("decoder_layers", c.decoder_layers);
  v("decoder_dim", c.decoder_dim);
  v("heads", c.heads);
  v("decoder_heads", c.decoder_heads);
  v("mlp_ratio", c.mlp_ratio);
  v("vocab_size", c.vocab_size);
  v("max_tokens", c.max_tokens);
  v("mask_ratio", c.mask_ratio);
  v("proj_dim", c.proj_dim);
  v("init_std", c.init_std);
  v("tau_init", c.tau_init);
  v("tau_min", c.tau_min);
  v("tau_max", c.tau_max);
  v("layernorm_eps", c.layernorm_eps);
}

template <typename C, typename V>
void visit_train(C& c, V&& v) {
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("base_lr", c.base_lr);
  v("min_lr", c.min_lr);
  v("warmup_iters", c.warmup_iters);
  v("weight_decay", c.weight_decay);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("adam_eps", c.adam_eps);
  v("grad_clip", c.grad_clip);
  v("momentum", c.momentum);
  v("distill_weight", c.distill_weight);
  v("normalize_itc", c.normalize_itc);
  v("rmim_normalize_targets", c.rmim_normalize_targets);
  v("detach_decoder_text", c.detach_decoder_text);
  v("objectives", c.objectives);
  v("seed", c.seed);
  v("metrics_path", c.metrics_path);
  v("timing_path", c.timing_path);
  v("checkpoint_dir", c.checkpoint_dir);
  v("checkpoint_every", c.checkpoint_every);
}

template <typename C, typename V>
void visit_data(C& c, V&& v) {
  v("image_size", c.image_size);
  v("channels", c.channels);
  v("grid_cells", c.grid_cells);
  v("min_objects", c.min_objects);
  v("max_objects", c.max_objects);
  v("disparity_prob", c.disparity_prob);
  v("small_object_prob", c.small_object_prob);
  v("max_tokens", c.max_tokens);
  v("relevance_filter", c.relevance_filter);
  v("relevance_min_fraction", c.relevance_min_fraction);
  v("train_pairs", c.train_pairs);
  v("held_out_pairs", c.held_out_pairs);
}

template <typename C, typename Visit>
json section_to_json(const C& c, Visit visit) {
  json out = json::object();
  visit(c, [&](const char* name, const auto& field) { out[name] = field; });
  return out;
}

template <typename C, typename Visit>
void section_from_json(const json& j, const std::string& section, C& c, Visit visit) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  std::set<std::string> known;
  visit(c, [&](const char* name, auto& field) {
    known.insert(name);
    const auto it = j.find(name);
    if (it == j.end()) return;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(section + "." + name + " must be a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(section + "." + name + " must be a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(section + "." + name + " must be a number");
    } else {
      if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
        throw ConfigError(section + "." + name + " must be a non-negative integer");
      }
    }
    field = it->template get<T>();
  });
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
  if (warmup_iters < 1) throw ConfigError("train.warmup_iters must be at least 1");
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
  if (!(min_lr > 0.0 && min_lr <= base_lr)) throw ConfigError("train.min_lr must lie in (0, base_lr]");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be non-negative");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("train.momentum must lie in [0, 1]");
  if (!(distill_weight >= 0.0 && distill_weight <= 1.0)) throw ConfigError("train.distill_weight must lie in [0, 1]");
  losses::Objectives::parse(objectives);
}

std::size_t RunConfig::steps_per_epoch() const {
  return (data.train_pairs + train.batch_size - 1) / train.batch_size;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate(model.patch_size);
  if (data.image_size != model.image_size || data.channels != model.channels) {
    throw ConfigError("data and model disagree on image geometry");
  }
  if (data.max_tokens > model.max_tokens) {
    throw ConfigError("data.max_tokens exceeds model.max_tokens");
  }
  if (model.vocab_size != data::Vocabulary().size()) {
    throw ConfigError("model.vocab_size must be " + std::to_string(data::Vocabulary().size()) +
                      " for the synthetic vocabulary");
  }
  if (data.train_pairs < train.batch_size) throw ConfigError("data.train_pairs is smaller than one batch");
  if (data.train_pairs % train.batch_size == 1) {
    throw ConfigError("data.train_pairs leaves a final batch of one pair; contrastive loss needs two");
  }
  if (data.held_out_pairs == 0) throw ConfigError("data.held_out_pairs must be at least 1");
}

json RunConfig::to_json() const {
  return {{"model", section_to_json(model, [](const auto& c, auto&& v) { visit_model(c, v); })},
          {"train", section_to_json(train, [](const auto& c, auto&& v) { visit_train(c, v); })},
          {"data", section_to_json(data, [](const auto& c, auto&& v) { visit_data(c, v); })}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      section_from_json(value, key, cfg.model, [](auto& c, auto&& v) { visit_model(c, v); });
    } else if (key == "train") {
      section_from_json(value, key, cfg.train, [](auto& c, auto&& v) { visit_train(c, v); });
    } else if (key == "data") {
      section_from_json(value, key, cfg.data, [](auto& c, auto&& v) { visit_data(c, v); });
    } else {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path);
  out << to_json().dump(2) << '\n';
}

}  // namespace vlmae
