// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Every op checks its output for NaN/Inf and
// throws NumericError naming the op.
//
// Broadcasting: the binary elementwise ops accept operands whose shapes are
// equal or where one shape is a trailing suffix of the other (a scalar, shape
// [], is a suffix of everything). Any other combination is a DimensionError.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vlmae/tensor.hpp"

namespace vlmae {

// a[..., k] x b[k, n] -> [..., n]. Leading dimensions of a are flattened into
// the row count, so a plain m x k by k x n product is the rank-2 case.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., k] w[k, n] + b[n]; the fused form of matmul followed by add.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Swaps the last two axes.
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Selects entries of axis 0: out[i, ...] = a[index[i], ...]. Repeats allowed.
Tensor take_rows(const Tensor& a, std::span<const std::size_t> index);
// table[V, d] looked up by ids -> [ids.size(), d]; ids >= V is a DataError.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);  // over the last axis
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
// tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);  // over the last axis

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
// Mean over rows of -sum_c target[r, c] log softmax(logits)[r, c]; target is a
// constant (never receives gradient).
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target);
Tensor mse(const Tensor& prediction, const Tensor& target);
Tensor mae(const Tensor& prediction, const Tensor& target);

// Multi-head scaled dot-product attention.
//   q: [B, Sq, D], k and v: [B, Sk, D], D divisible by heads.
//   key_valid: empty, or B*Sk flags; a 0 flag removes that key for every query
//   of that batch element. At least one key per batch element must be valid.
// When probs is non-null it receives the [B, heads, Sq, Sk] attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                 std::size_t heads, std::vector<double>* probs = nullptr);

}  // namespace vlmae
