// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/optim.hpp"

#include <cmath>
#include <numbers>

#include "vlmae/errors.hpp"

namespace vlmae {

AdamWState AdamWState::for_params(const std::vector<ParamRef>& params) {
  AdamWState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), 0.0);
    s.v.emplace_back(p.tensor.size(), 0.0);
  }
  return s;
}

void adamw_step(std::vector<ParamRef>& params, AdamWState& state, double lr, const AdamWOptions& o) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state does not mirror the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.size()) {
      throw ContractError("adamw_step: state shape mismatch for " + params[i].name);
    }
    if (!params[i].tensor.has_grad()) continue;
    for (double g : params[i].tensor.node()->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
    }
  }
  const std::size_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto data = p.tensor.data();
    const auto& grad = p.tensor.node()->grad;
    const bool has = !grad.empty();
    const double decay = p.decay ? lr * o.weight_decay : 0.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = has ? grad[k] : 0.0;
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g;
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + o.eps);
      data[k] -= lr * update + decay * data[k];
    }
  }
}

double clip_grad_norm(std::vector<ParamRef>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.node()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.tensor.node()->grad) g *= factor;
    }
  }
  return norm;
}

double lr_at(std::size_t step, const Schedule& s) {
  if (step < s.warmup_iters) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_iters);
  }
  const std::size_t last = s.total_steps > 0 ? s.total_steps - 1 : 0;
  if (last <= s.warmup_iters) return s.base_lr;
  if (step >= last) return s.min_lr;
  const double progress = static_cast<double>(step - s.warmup_iters) / static_cast<double>(last - s.warmup_iters);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace vlmae
