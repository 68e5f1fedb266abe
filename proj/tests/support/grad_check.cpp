// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "vlmae/losses.hpp"
#include "vlmae/model.hpp"
#include "vlmae/ops.hpp"

namespace vlmae::testing {

GradCheckResult grad_check(const LossFn& f, std::vector<Tensor> inputs, double h) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  tape().clear();
  Tensor loss = f(inputs);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad());

  NoGradGuard no_grad;
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + h;
      const double fp = f(inputs).item();
      values[j] = saved - h;
      const double fm = f(inputs).item();
      values[j] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++res.entries;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "input " + std::to_string(k) + ", entry " + std::to_string(j);
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return res;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(shape, std::move(v));
}

Tensor random_away_from_zero(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (lo + (hi - lo) * rng.uniform());
  return Tensor::from(shape, std::move(v));
}

namespace {

std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

GradCheckResult check_with_weights(Rng& rng, std::vector<Tensor> inputs,
                                   const std::function<Tensor(const std::vector<Tensor>&)>& op) {
  // The weights must be identical for every evaluation, so draw them once
  // from a probe output.
  Tensor probe;
  {
    NoGradGuard no_grad;
    probe = op(inputs);
  }
  const Tensor w = random_tensor(probe.shape(), rng);
  return grad_check([&](const std::vector<Tensor>& in) { return sum(mul(op(in), w)); }, std::move(inputs));
}

std::vector<GradCase> build_op_cases() {
  std::vector<GradCase> c;
  c.push_back({"matmul", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t m = dim_in(r, 1, 4), k = dim_in(r, 1, 4), n = dim_in(r, 1, 4);
                 return check_with_weights(r, {random_tensor({m, k}, r), random_tensor({k, n}, r)},
                                           [](const auto& in) { return matmul(in[0], in[1]); });
               }});
  c.push_back({"matmul_batched", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({2, 3, 4}, r), random_tensor({4, 2}, r)},
                                           [](const auto& in) { return matmul(in[0], in[1]); });
               }});
  c.push_back({"linear", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t k = dim_in(r, 1, 4), n = dim_in(r, 1, 4);
                 return check_with_weights(
                     r, {random_tensor({2, dim_in(r, 1, 3), k}, r), random_tensor({k, n}, r), random_tensor({n}, r)},
                     [](const auto& in) { return linear(in[0], in[1], in[2]); });
               }});
  c.push_back({"transpose", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({2, dim_in(r, 1, 4), dim_in(r, 1, 4)}, r)},
                                           [](const auto& in) { return transpose(in[0]); });
               }});
  auto binary_case = [&](const char* name, Tensor (*op)(const Tensor&, const Tensor&), bool positive_b) {
    c.push_back({name, [op, positive_b](std::uint64_t seed) {
                   Rng r(seed);
                   const Shape s{dim_in(r, 1, 3), dim_in(r, 1, 4)};
                   Tensor b = positive_b ? random_away_from_zero(s, r, 0.5, 2.0) : random_tensor(s, r);
                   return check_with_weights(r, {random_tensor(s, r), b}, [op](const auto& in) { return op(in[0], in[1]); });
                 }});
  };
  binary_case("add", add, false);
  binary_case("sub", sub, false);
  binary_case("mul", mul, false);
  binary_case("div", div, true);
  c.push_back({"broadcast", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t n = dim_in(r, 1, 4);
                 const Shape big{2, dim_in(r, 1, 3), n};
                 return check_with_weights(r, {random_tensor(big, r), random_tensor({n}, r), random_tensor({}, r)},
                                           [](const auto& in) { return mul(add(in[0], in[1]), in[2]); });
               }});
  c.push_back({"broadcast_left", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t n = dim_in(r, 1, 4);
                 return check_with_weights(
                     r, {random_away_from_zero({n}, r, 0.5, 2.0), random_away_from_zero({3, n}, r, 0.5, 2.0)},
                     [](const auto& in) { return div(in[0], in[1]); });
               }});
  c.push_back({"scale", [](std::uint64_t seed) {
                 Rng r(seed);
                 const double f = r.normal();
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 5)}, r)},
                                           [f](const auto& in) { return scale(in[0], f); });
               }});
  c.push_back({"exp", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), 3}, r)},
                                           [](const auto& in) { return exp(in[0]); });
               }});
  c.push_back({"sum", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), dim_in(r, 1, 3)}, r)},
                                           [](const auto& in) { return sum(in[0]); });
               }});
  c.push_back({"mean", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), dim_in(r, 1, 3)}, r)},
                                           [](const auto& in) { return mean(in[0]); });
               }});
  c.push_back({"reshape", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({2, 6}, r)},
                                           [](const auto& in) { return reshape(in[0], {3, 2, 2}); });
               }});
  c.push_back({"concat", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t axis = r.below(3);
                 Shape a{2, 3, 2}, b{2, 3, 2};
                 b[axis] = dim_in(r, 1, 3);
                 return check_with_weights(r, {random_tensor(a, r), random_tensor(b, r)}, [axis](const auto& in) {
                   const Tensor parts[] = {in[0], in[1], in[0]};
                   return concat(parts, axis);
                 });
               }});
  c.push_back({"take_rows", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t rows = dim_in(r, 1, 4);
                 std::vector<std::size_t> idx(dim_in(r, 1, 6));
                 for (auto& i : idx) i = r.below(rows);
                 return check_with_weights(r, {random_tensor({rows, 3}, r)},
                                           [idx](const auto& in) { return take_rows(in[0], idx); });
               }});
  c.push_back({"embedding", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t vocab = dim_in(r, 2, 6);
                 std::vector<std::size_t> ids(dim_in(r, 1, 6));
                 for (auto& i : ids) i = r.below(vocab);
                 return check_with_weights(r, {random_tensor({vocab, 3}, r)},
                                           [ids](const auto& in) { return embedding(in[0], ids); });
               }});
  c.push_back({"softmax", [](std::uint64_t seed) {
                 Rng r(seed);
                 const Shape s{dim_in(r, 1, 3), dim_in(r, 1, 3), dim_in(r, 1, 4)};
                 const std::size_t axis = r.below(3);
                 return check_with_weights(r, {random_tensor(s, r, 2.0)},
                                           [axis](const auto& in) { return softmax(in[0], axis); });
               }});
  c.push_back({"log_softmax", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), dim_in(r, 1, 5)}, r, 2.0)},
                                           [](const auto& in) { return log_softmax(in[0]); });
               }});
  c.push_back({"layernorm", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t d = dim_in(r, 2, 6);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), d}, r), random_tensor({d}, r),
                                               random_tensor({d}, r)},
                                           [](const auto& in) { return layernorm(in[0], in[1], in[2]); });
               }});
  c.push_back({"gelu", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), dim_in(r, 1, 5)}, r, 2.0)},
                                           [](const auto& in) { return gelu(in[0]); });
               }});
  c.push_back({"l2_normalize", [](std::uint64_t seed) {
                 Rng r(seed);
                 return check_with_weights(r, {random_tensor({dim_in(r, 1, 3), dim_in(r, 2, 5)}, r)},
                                           [](const auto& in) { return l2_normalize(in[0]); });
               }});
  c.push_back({"cross_entropy", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t rows = dim_in(r, 1, 4), classes = dim_in(r, 2, 5);
                 std::vector<std::size_t> labels(rows);
                 for (auto& l : labels) l = r.below(classes);
                 return grad_check([labels](const auto& in) { return cross_entropy(in[0], labels); },
                                   {random_tensor({rows, classes}, r, 2.0)});
               }});
  c.push_back({"soft_cross_entropy", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t rows = dim_in(r, 1, 4), classes = dim_in(r, 2, 5);
                 Tensor target = softmax(random_tensor({rows, classes}, r), 1).detach();
                 return grad_check([target](const auto& in) { return soft_cross_entropy(in[0], target); },
                                   {random_tensor({rows, classes}, r, 2.0)});
               }});
  c.push_back({"mse", [](std::uint64_t seed) {
                 Rng r(seed);
                 const Shape s{dim_in(r, 1, 3), dim_in(r, 1, 4)};
                 return grad_check([](const auto& in) { return mse(in[0], in[1]); },
                                   {random_tensor(s, r), random_tensor(s, r)});
               }});
  c.push_back({"mae", [](std::uint64_t seed) {
                 Rng r(seed);
                 const Shape s{dim_in(r, 1, 3), dim_in(r, 1, 4)};
                 Tensor target = random_tensor(s, r);
                 Tensor diff = random_away_from_zero(s, r, 0.1, 1.0);
                 return grad_check([target](const auto& in) { return mae(in[0], target); }, {add(target, diff).detach()});
               }});
  c.push_back({"attention", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t heads = dim_in(r, 1, 2);
                 const std::size_t width = heads * dim_in(r, 1, 3);
                 const std::size_t batch = dim_in(r, 1, 2), sq = dim_in(r, 1, 3), sk = dim_in(r, 1, 4);
                 std::vector<std::uint8_t> valid(batch * sk, 1);
                 for (std::size_t b = 0; b < batch; ++b) {
                   for (std::size_t j = 1; j < sk; ++j) valid[b * sk + j] = r.bernoulli(0.7);
                 }
                 return check_with_weights(r,
                                           {random_tensor({batch, sq, width}, r), random_tensor({batch, sk, width}, r),
                                            random_tensor({batch, sk, width}, r)},
                                           [valid, heads](const auto& in) {
                                             return attention(in[0], in[1], in[2], valid, heads);
                                           });
               }});
  return c;
}

std::vector<MaskPlan> random_plans(Rng& r, std::size_t batch, std::size_t n, double ratio) {
  std::vector<MaskPlan> plans;
  for (std::size_t b = 0; b < batch; ++b) plans.push_back(sample_mask_plan(r, n, ratio));
  return plans;
}

std::vector<GradCase> build_loss_cases() {
  std::vector<GradCase> c;
  c.push_back({"rmim", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t batch = dim_in(r, 1, 3), n = dim_in(r, 2, 5), d = dim_in(r, 1, 4);
                 const auto plans = random_plans(r, batch, n, 0.5);
                 std::vector<std::uint8_t> region(batch * n);
                 for (auto& f : region) f = r.bernoulli(0.6);
                 for (std::size_t i : plans[0].masked) region[i] = 1;
                 Tensor target = random_tensor({batch, n, d}, r);
                 return grad_check(
                     [plans, region, target](const auto& in) {
                       return losses::rmim_loss(in[0], target, plans, region).loss;
                     },
                     {random_tensor({batch, n, d}, r)});
               }});
  c.push_back({"ifr", [](std::uint64_t seed) {
                 Rng r(seed);
                 const Shape s{dim_in(r, 1, 3), dim_in(r, 1, 4)};
                 Tensor shadow = random_tensor(s, r);
                 Tensor online = add(shadow, random_away_from_zero(s, r, 0.1, 1.0)).detach();
                 return grad_check([shadow](const auto& in) { return losses::ifr_loss(in[0], shadow); }, {online});
               }});
  c.push_back({"itc", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t batch = dim_in(r, 2, 4), d = dim_in(r, 2, 4);
                 Tensor sv = random_tensor({batch, d}, r);
                 Tensor sw = random_tensor({batch, d}, r);
                 losses::ItcOptions opt;
                 opt.distill_weight = r.uniform();
                 const Tensor tau = Tensor::scalar(0.2 + 0.8 * r.uniform());
                 return grad_check(
                     [sv, sw, tau, opt](const auto& in) { return losses::itc_loss(in[0], in[1], sv, sw, tau, opt).loss; },
                     {random_tensor({batch, d}, r), random_tensor({batch, d}, r)});
               }});
  // Soft targets are constants of the loss, temperature included, so the
  // temperature derivative is checked with one-hot targets.
  c.push_back({"itc_temperature", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t batch = dim_in(r, 2, 4), d = dim_in(r, 2, 4);
                 Tensor sv = random_tensor({batch, d}, r);
                 Tensor sw = random_tensor({batch, d}, r);
                 losses::ItcOptions opt;
                 opt.distill_weight = 0.0;
                 return grad_check(
                     [sv, sw, opt](const auto& in) { return losses::itc_loss(in[0], in[1], sv, sw, in[2], opt).loss; },
                     {random_tensor({batch, d}, r), random_tensor({batch, d}, r),
                      Tensor::scalar(0.2 + 0.8 * r.uniform())});
               }});
  c.push_back({"itm", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t rows = 3 * dim_in(r, 1, 3);
                 std::vector<std::size_t> labels(rows);
                 for (auto& l : labels) l = r.below(2);
                 return grad_check([labels](const auto& in) { return losses::itm_loss(in[0], labels); },
                                   {random_tensor({rows, 2}, r, 2.0)});
               }});
  c.push_back({"mlm", [](std::uint64_t seed) {
                 Rng r(seed);
                 const std::size_t rows = dim_in(r, 2, 6), vocab = dim_in(r, 2, 6);
                 std::vector<std::size_t> pos, tgt;
                 for (std::size_t i = 0; i < rows; ++i) {
                   if (r.bernoulli(0.5) || pos.empty()) {
                     pos.push_back(i);
                     tgt.push_back(r.below(vocab));
                   }
                 }
                 return grad_check([pos, tgt](const auto& in) { return losses::mlm_loss(in[0], pos, tgt).loss; },
                                   {random_tensor({rows, vocab}, r, 2.0)});
               }});
  return c;
}

}  // namespace

const std::vector<GradCase>& op_grad_cases() {
  static const std::vector<GradCase> cases = build_op_cases();
  return cases;
}

const std::vector<GradCase>& loss_grad_cases() {
  static const std::vector<GradCase> cases = build_loss_cases();
  return cases;
}

}  // namespace vlmae::testing
