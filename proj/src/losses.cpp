// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/losses.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "vlmae/errors.hpp"
#include "vlmae/ops.hpp"

namespace vlmae::losses {

namespace {

std::vector<double> row_softmax(std::span<const double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> p(row.size());
  double s = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) s += (p[j] = std::exp(row[j] - mx));
  for (double& v : p) v /= s;
  return p;
}

std::size_t sample_excluding(std::span<const double> logits, std::size_t exclude, Rng& rng) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (j != exclude) mx = std::max(mx, logits[j]);
  }
  std::vector<double> w(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (j != exclude) total += (w[j] = std::exp(logits[j] - mx));
  }
  double u = rng.uniform() * total;
  std::size_t last = exclude;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (j == exclude) continue;
    last = j;
    if (u < w[j]) return j;
    u -= w[j];
  }
  return last;
}

}  // namespace

RmimResult rmim_loss(const Tensor& predicted, const Tensor& target, const std::vector<MaskPlan>& plans,
                     std::span<const std::uint8_t> region_mask, bool normalize_targets) {
  if (predicted.shape() != target.shape() || predicted.rank() < 2) {
    throw DimensionError("rmim_loss: prediction " + to_string(predicted.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  const std::size_t width = predicted.shape().back();
  const std::size_t rows = predicted.size() / width;
  const std::size_t batch = plans.size();
  if (batch == 0 || rows % batch != 0) throw DimensionError("rmim_loss: plans do not divide the patch rows");
  const std::size_t n = rows / batch;
  if (region_mask.size() != rows) throw DimensionError("rmim_loss: region mask length mismatch");

  RmimResult result;
  result.empty.assign(batch, 0);
  std::vector<std::size_t> index;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t p : plans[b].masked) {
      if (p >= n) throw DimensionError("rmim_loss: masked index out of range");
      if (region_mask[b * n + p]) {
        index.push_back(b * n + p);
        ++count;
      }
    }
    result.empty[b] = count == 0;
  }
  result.selected_patches = index.size();
  if (index.empty()) {
    result.loss = Tensor::scalar(0.0);
    return result;
  }
  Tensor pred = take_rows(reshape(predicted, {rows, width}), index);
  std::vector<double> tgt(index.size() * width);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const double* src = target.data().data() + index[r] * width;
    double* dst = tgt.data() + r * width;
    std::copy_n(src, width, dst);
    if (normalize_targets) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < width; ++j) mu += dst[j];
      mu /= static_cast<double>(width);
      for (std::size_t j = 0; j < width; ++j) var += (dst[j] - mu) * (dst[j] - mu);
      var /= static_cast<double>(width);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (std::size_t j = 0; j < width; ++j) dst[j] = (dst[j] - mu) * inv;
    }
  }
  result.loss = mse(pred, Tensor::from({index.size(), width}, std::move(tgt)));
  return result;
}

Tensor ifr_loss(const Tensor& online_cls, const Tensor& shadow_cls) {
  if (shadow_cls.requires_grad()) throw ContractError("ifr_loss: shadow [CLS] must not carry gradients");
  return mae(online_cls, shadow_cls);
}

Tensor soft_targets(const Tensor& shadow_logits, double distill_weight) {
  const std::size_t b = shadow_logits.dim(0);
  const std::size_t c = shadow_logits.dim(1);
  std::vector<double> y(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    const auto p = row_softmax(shadow_logits.data().subspan(i * c, c));
    for (std::size_t j = 0; j < c; ++j) {
      y[i * c + j] = (1.0 - distill_weight) * (i == j ? 1.0 : 0.0) + distill_weight * p[j];
    }
  }
  return Tensor::from({b, c}, std::move(y));
}

ItcResult itc_loss(const Tensor& image_proj, const Tensor& text_proj, const Tensor& shadow_image_proj,
                   const Tensor& shadow_text_proj, const Tensor& tau, const ItcOptions& options) {
  if (image_proj.rank() != 2 || text_proj.shape() != image_proj.shape() ||
      shadow_image_proj.shape() != image_proj.shape() || shadow_text_proj.shape() != image_proj.shape()) {
    throw DimensionError("itc_loss: embeddings must share one [B, d] shape");
  }
  const std::size_t batch = image_proj.dim(0);
  if (batch < options.min_batch) {
    throw ConfigError("itc_loss: batch size " + std::to_string(batch) + " below minimum " +
                      std::to_string(options.min_batch));
  }
  if (shadow_image_proj.requires_grad() || shadow_text_proj.requires_grad()) {
    throw ContractError("itc_loss: momentum embeddings must not carry gradients");
  }
  if (tau.size() != 1) throw DimensionError("itc_loss: temperature must be a scalar");
  auto prep = [&](const Tensor& t) { return options.normalize ? l2_normalize(t) : t; };
  Tensor vi = prep(image_proj);
  Tensor wt = prep(text_proj);
  Tensor vm = prep(shadow_image_proj);
  Tensor wm = prep(shadow_text_proj);

  ItcResult r;
  r.logits_i2t = div(matmul(vi, transpose(wm)), tau);
  r.logits_t2i = div(matmul(wt, transpose(vm)), tau);
  {
    NoGradGuard no_grad;
    const Tensor tau_const = tau.detach();
    const Tensor m_i2t = div(matmul(vm, transpose(wm)), tau_const);
    const Tensor m_t2i = div(matmul(wm, transpose(vm)), tau_const);
    r.target_i2t = soft_targets(m_i2t, options.distill_weight);
    r.target_t2i = soft_targets(m_t2i, options.distill_weight);
  }
  r.loss = scale(add(soft_cross_entropy(r.logits_i2t, r.target_i2t), soft_cross_entropy(r.logits_t2i, r.target_t2i)),
                 0.5);
  return r;
}

ItmNegatives mine_itm_negatives(const Tensor& logits_i2t, const Tensor& logits_t2i, Rng& rng) {
  const std::size_t batch = logits_i2t.dim(0);
  if (batch < 2) throw DataError("ITM negative mining needs at least two pairs in the batch");
  ItmNegatives neg;
  for (std::size_t i = 0; i < batch; ++i) {
    neg.text_for_image.push_back(sample_excluding(logits_i2t.data().subspan(i * batch, batch), i, rng));
  }
  for (std::size_t i = 0; i < batch; ++i) {
    neg.image_for_text.push_back(sample_excluding(logits_t2i.data().subspan(i * batch, batch), i, rng));
  }
  return neg;
}

Tensor itm_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw DimensionError("itm_loss: logits must be [R, 2]");
  return cross_entropy(logits, labels);
}

MlmResult mlm_loss(const Tensor& token_logits, std::span<const std::size_t> positions,
                   std::span<const std::size_t> target_ids) {
  if (positions.size() != target_ids.size()) throw ContractError("mlm_loss: positions and targets differ in length");
  MlmResult r;
  r.targets = positions.size();
  if (positions.empty()) {
    r.loss = Tensor::scalar(0.0);
    return r;
  }
  const std::size_t rows = token_logits.dim(0);
  for (std::size_t p : positions) {
    if (p >= rows) {
      throw ContractError("mlm_loss: target position " + std::to_string(p) + " outside " + std::to_string(rows) +
                          " token rows");
    }
  }
  r.loss = cross_entropy(take_rows(token_logits, positions), target_ids);
  return r;
}

Objectives Objectives::parse(const std::string& list) {
  Objectives o{false, false, false, false, false};
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "rmim") {
      o.rmim = true;
    } else if (item == "ifr") {
      o.ifr = true;
    } else if (item == "itc") {
      o.itc = true;
    } else if (item == "itm") {
      o.itm = true;
    } else if (item == "mlm") {
      o.mlm = true;
    } else if (!item.empty()) {
      throw ConfigError("unknown objective '" + item + "'");
    }
  }
  o.validate();
  return o;
}

std::string Objectives::to_string() const {
  std::string s;
  auto put = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  put(rmim, "rmim");
  put(ifr, "ifr");
  put(itc, "itc");
  put(itm, "itm");
  put(mlm, "mlm");
  return s;
}

void Objectives::validate() const {
  if (!(itc && itm && mlm)) throw ConfigError("objective set must include itc, itm and mlm, got '" + to_string() + "'");
}

Tensor total_loss(LossBundle& bundle) {
  const std::pair<const char*, const Tensor*> parts[] = {
      {"rmim", &bundle.rmim}, {"ifr", &bundle.ifr}, {"itc", &bundle.itc}, {"itm", &bundle.itm}, {"mlm", &bundle.mlm}};
  Tensor total;
  for (const auto& [name, t] : parts) {
    if (!t->defined()) continue;
    if (t->size() != 1) throw DimensionError(std::string(name) + " loss is not a scalar");
    if (!std::isfinite(t->item())) throw NumericError(std::string(name) + " loss is not finite");
    total = total.defined() ? add(total, *t) : *t;
  }
  if (!total.defined()) total = Tensor::scalar(0.0);
  bundle.total = total;
  return total;
}

}  // namespace vlmae::losses
