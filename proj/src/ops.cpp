// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "vlmae/errors.hpp"

namespace vlmae {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

using NodePtr = std::shared_ptr<TensorNode>;

bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(Shape shape, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(numel(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

void check_finite(const char* op, const Tensor& out) {
  const auto values = Eigen::Map<const Eigen::ArrayXd>(out.data().data(), static_cast<Eigen::Index>(out.size()));
  if (!values.allFinite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor argument");
}

constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kA = 0.044715;

// tanh(z) = 1 - 2 / (1 + exp(2z)); vectorises where std::tanh does not.
template <typename Expr>
Eigen::ArrayXd tanh_via_exp(const Expr& z) {
  return 1.0 - 2.0 / (1.0 + (2.0 * z).exp());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Elementwise binary op with trailing-suffix broadcasting. fa/fb return the
// local derivative with respect to the first/second operand.
template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  require_defined(op, a);
  require_defined(op, b);
  bool a_big;
  if (is_suffix(b.shape(), a.shape())) {
    a_big = true;
  } else if (is_suffix(a.shape(), b.shape())) {
    a_big = false;
  } else {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a.shape()) + " with " +
                         to_string(b.shape()));
  }
  const Shape& out_shape = a_big ? a.shape() : b.shape();
  const std::size_t n = numel(out_shape);
  const std::size_t inner = a_big ? b.size() : a.size();
  const std::size_t outer = n / inner;
  Tensor out = make_output(out_shape, tracks({&a, &b}));
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      double* row = po + o * inner;
      if (a_big) {
        const double* ra = pa + o * inner;
        for (std::size_t j = 0; j < inner; ++j) row[j] = fwd(ra[j], pb[j]);
      } else {
        const double* rb = pb + o * inner;
        for (std::size_t j = 0; j < inner; ++j) row[j] = fwd(pa[j], rb[j]);
      }
    }
  }
  check_finite(op, out);
  if (out.requires_grad()) {
    NodePtr an = a.shared(), bn = b.shared(), on = out.shared();
    tape().record(op, [an, bn, on, a_big, inner, outer, da, db] {
      if (on->grad.empty()) return;
      const double* pa = an->data.data();
      const double* pb = bn->data.data();
      const double* g = on->grad.data();
      double* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
      double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
      for (std::size_t o = 0; o < outer; ++o) {
        const double* gr = g + o * inner;
        const std::size_t off_a = a_big ? o * inner : 0;
        const std::size_t off_b = a_big ? 0 : o * inner;
        const double* ra = pa + off_a;
        const double* rb = pb + off_b;
        if (ga) {
          double* out_a = ga + off_a;
          for (std::size_t j = 0; j < inner; ++j) out_a[j] += gr[j] * da(ra[j], rb[j]);
        }
        if (gb) {
          double* out_b = gb + off_b;
          for (std::size_t j = 0; j < inner; ++j) out_b[j] += gr[j] * db(ra[j], rb[j]);
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out = make_output(std::move(out_shape), tracks({&a, &b}));
  MatMap(out.data().data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  check_finite("matmul", out);
  if (out.requires_grad()) {
    NodePtr an = a.shared(), bn = b.shared(), on = out.shared();
    tape().record("matmul", [an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      ConstMatMap g(on->grad.data(), m, n);
      if (an->requires_grad) {
        MatMap(an->grad_buffer().data(), m, k).noalias() += g * ConstMatMap(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        MatMap(bn->grad_buffer().data(), k, n).noalias() += ConstMatMap(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined("linear", x);
  require_defined("linear", weight);
  require_defined("linear", bias);
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(0) || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: incompatible shapes " + to_string(x.shape()) + ", " + to_string(weight.shape()) +
                         " and " + to_string(bias.shape()));
  }
  const std::size_t k = weight.dim(0);
  const std::size_t n = weight.dim(1);
  const std::size_t m = x.size() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor out = make_output(std::move(out_shape), tracks({&x, &weight, &bias}));
  MatMap y(out.data().data(), m, n);
  y.noalias() = ConstMatMap(x.data().data(), m, k) * ConstMatMap(weight.data().data(), k, n);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);
  check_finite("linear", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), wn = weight.shared(), bn = bias.shared(), on = out.shared();
    tape().record("linear", [xn, wn, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      ConstMatMap g(on->grad.data(), m, n);
      if (xn->requires_grad) {
        MatMap(xn->grad_buffer().data(), m, k).noalias() += g * ConstMatMap(wn->data.data(), k, n).transpose();
      }
      if (wn->requires_grad) {
        MatMap(wn->grad_buffer().data(), k, n).noalias() += ConstMatMap(xn->data.data(), m, k).transpose() * g;
      }
      if (bn->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(bn->grad_buffer().data(), n) += g.colwise().sum();
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_defined("transpose", a);
  if (a.rank() < 2) throw DimensionError("transpose: needs rank >= 2, got " + to_string(a.shape()));
  const std::size_t r = a.dim(a.rank() - 2);
  const std::size_t c = a.dim(a.rank() - 1);
  const std::size_t batch = a.size() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor out = make_output(std::move(out_shape), tracks({&a}));
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap(out.data().data() + b * r * c, c, r) = ConstMatMap(a.data().data() + b * r * c, r, c).transpose();
  }
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    tape().record("transpose", [an, on, r, c, batch] {
      if (on->grad.empty()) return;
      double* ga = an->grad_buffer().data();
      for (std::size_t b = 0; b < batch; ++b) {
        MatMap(ga + b * r * c, r, c) += ConstMatMap(on->grad.data() + b * r * c, c, r).transpose();
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined("scale", a);
  Tensor out = make_output(a.shape(), tracks({&a}));
  std::transform(a.data().begin(), a.data().end(), out.data().begin(), [factor](double x) { return x * factor; });
  check_finite("scale", out);
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    tape().record("scale", [an, on, factor] {
      if (on->grad.empty()) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * on->grad[i];
    });
  }
  return out;
}

Tensor exp(const Tensor& a) {
  require_defined("exp", a);
  Tensor out = make_output(a.shape(), tracks({&a}));
  std::transform(a.data().begin(), a.data().end(), out.data().begin(), [](double x) { return std::exp(x); });
  check_finite("exp", out);
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    tape().record("exp", [an, on] {
      if (on->grad.empty()) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->data[i] * on->grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  Tensor out = make_output({}, tracks({&a}));
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.data()[0] = s;
  check_finite("sum", out);
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    tape().record("sum", [an, on] {
      if (on->grad.empty()) return;
      const double g = on->grad[0];
      for (double& x : an->grad_buffer()) x += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", a);
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out = make_output(std::move(shape), tracks({&a}));
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    tape().record("reshape", [an, on] {
      if (on->grad.empty()) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    require_defined("concat", p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: " + to_string(s) + " does not match " + to_string(first));
    out_shape[axis] += s[axis];
    rg = rg || p.requires_grad();
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  const std::size_t out_chunk = numel(out_shape) / outer;
  Tensor out = make_output(out_shape, rg && grad_enabled());
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.size() / outer;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data().data() + o * out_chunk + offset);
    }
    offsets.push_back(offset);
    offset += chunk;
  }
  if (out.requires_grad()) {
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.shared());
    NodePtr on = out.shared();
    tape().record("concat", [nodes, on, offsets, outer, out_chunk] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!nodes[i]->requires_grad) continue;
        auto g = nodes[i]->grad_buffer();
        const std::size_t chunk = g.size() / outer;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = on->grad.data() + o * out_chunk + offsets[i];
          double* dst = g.data() + o * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor take_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_defined("take_rows", a);
  if (a.rank() < 1) throw DimensionError("take_rows: needs rank >= 1");
  if (index.empty()) throw DimensionError("take_rows: empty index list");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.size() / rows;
  for (std::size_t i : index) {
    if (i >= rows) {
      throw DimensionError("take_rows: index " + std::to_string(i) + " out of range for " + to_string(a.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[0] = index.size();
  Tensor out = make_output(std::move(out_shape), tracks({&a}));
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(a.data().data() + index[r] * width, width, out.data().data() + r * width);
  }
  if (out.requires_grad()) {
    NodePtr an = a.shared(), on = out.shared();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape().record("take_rows", [an, on, idx = std::move(idx), width] {
      if (on->grad.empty()) return;
      double* ga = an->grad_buffer().data();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = on->grad.data() + r * width;
        double* dst = ga + idx[r] * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_defined("embedding", table);
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, d], got " + to_string(table.shape()));
  for (std::size_t id : ids) {
    if (id >= table.dim(0)) {
      throw DataError("embedding: token id " + std::to_string(id) + " >= vocabulary size " +
                      std::to_string(table.dim(0)));
    }
  }
  return take_rows(table, ids);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined("softmax", x);
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + to_string(x.shape()));
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.size() / (len * inner);
  Tensor out = make_output(x.shape(), tracks({&x}));
  const double* px = x.data().data();
  double* py = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(px[base + j * inner] - mx);
        py[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) py[base + j * inner] /= s;
    }
  }
  check_finite("softmax", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), on = out.shared();
    tape().record("softmax", [xn, on, outer, len, inner] {
      if (on->grad.empty()) return;
      const double* y = on->data.data();
      const double* g = on->grad.data();
      double* gx = xn->grad_buffer().data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t p = base + j * inner;
            gx[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  require_defined("log_softmax", x);
  if (x.rank() < 1) throw DimensionError("log_softmax: needs rank >= 1");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  Tensor out = make_output(x.shape(), tracks({&x}));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * len;
    double* py = out.data().data() + r * len;
    const double mx = *std::max_element(px, px + len);
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += std::exp(px[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < len; ++j) py[j] = px[j] - lse;
  }
  check_finite("log_softmax", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), on = out.shared();
    tape().record("log_softmax", [xn, on, rows, len] {
      if (on->grad.empty()) return;
      double* gx = xn->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = on->data.data() + r * len;
        const double* g = on->grad.data() + r * len;
        double gs = 0.0;
        for (std::size_t j = 0; j < len; ++j) gs += g[j];
        for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += g[j] - std::exp(y[j]) * gs;
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined("layernorm", x);
  require_defined("layernorm", gain);
  require_defined("layernorm", bias);
  if (x.rank() < 1) throw DimensionError("layernorm: needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layernorm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match feature size of " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  Tensor out = make_output(x.shape(), tracks({&x, &gain, &bias}));
  auto xhat = std::make_shared<Buffer>(x.size());
  auto rstd = std::make_shared<Buffer>(rows);
  const double* g = gain.data().data();
  const double* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += px[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* ph = xhat->data() + r * d;
    double* py = out.data().data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      ph[j] = (px[j] - mu) * rs;
      py[j] = ph[j] * g[j] + b[j];
    }
  }
  check_finite("layernorm", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), gn = gain.shared(), bn = bias.shared(), on = out.shared();
    tape().record("layernorm", [xn, gn, bn, on, xhat, rstd, rows, d] {
      if (on->grad.empty()) return;
      double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
      double* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
      double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
      const double* gain_v = gn->data.data();
      Buffer dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = on->grad.data() + r * d;
        const double* h = xhat->data() + r * d;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dxhat[j] = dy[j] * gain_v[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * h[j];
          if (gg) gg[j] += dy[j] * h[j];
          if (gb) gb[j] += dy[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        if (gx) {
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (*rstd)[r] * (dxhat[j] - m1 - h[j] * m2);
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  require_defined("gelu", x);
  Tensor out = make_output(x.shape(), tracks({&x}));
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), n);
  Eigen::Map<Eigen::ArrayXd>(out.data().data(), n) = 0.5 * v * (1.0 + tanh_via_exp(kC * (v + kA * v.cube())));
  check_finite("gelu", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), on = out.shared();
    tape().record("gelu", [xn, on] {
      if (on->grad.empty()) return;
      const auto n = static_cast<Eigen::Index>(xn->data.size());
      const Eigen::Map<const Eigen::ArrayXd> v(xn->data.data(), n);
      const Eigen::Map<const Eigen::ArrayXd> g(on->grad.data(), n);
      const Eigen::ArrayXd t = tanh_via_exp(kC * (v + kA * v.cube()));
      Eigen::Map<Eigen::ArrayXd>(xn->grad_buffer().data(), n) +=
          g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t.square()) * kC * (1.0 + 3.0 * kA * v.square()));
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& x, double eps) {
  require_defined("l2_normalize", x);
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor out = make_output(x.shape(), tracks({&x}));
  auto norms = std::make_shared<Buffer>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += px[j] * px[j];
    const double n = std::max(std::sqrt(s), eps);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < d; ++j) out.data()[r * d + j] = px[j] / n;
  }
  check_finite("l2_normalize", out);
  if (out.requires_grad()) {
    NodePtr xn = x.shared(), on = out.shared();
    tape().record("l2_normalize", [xn, on, norms, rows, d, eps] {
      if (on->grad.empty()) return;
      double* gx = xn->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = on->data.data() + r * d;
        const double* g = on->grad.data() + r * d;
        const double n = (*norms)[r];
        if (n <= eps) {
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] / n;
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[j] - y[j] * dot) / n;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_defined("cross_entropy", logits);
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  for (std::size_t l : labels) {
    if (l >= classes) throw DataError("cross_entropy: label " + std::to_string(l) + " out of range");
  }
  Tensor out = make_output({}, tracks({&logits}));
  auto probs = std::make_shared<Buffer>(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = logits.data().data() + r * classes;
    const double mx = *std::max_element(px, px + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(px[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[r * classes + c] = std::exp(px[c] - lse);
    total += lse - px[labels[r]];
  }
  out.data()[0] = total / static_cast<double>(rows);
  check_finite("cross_entropy", out);
  if (out.requires_grad()) {
    NodePtr ln = logits.shared(), on = out.shared();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape().record("cross_entropy", [ln, on, probs, lab = std::move(lab), rows, classes] {
      if (on->grad.empty()) return;
      const double g = on->grad[0] / static_cast<double>(rows);
      double* gl = ln->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < classes; ++c) {
          gl[r * classes + c] += g * ((*probs)[r * classes + c] - (c == lab[r] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target) {
  require_defined("soft_cross_entropy", logits);
  require_defined("soft_cross_entropy", target);
  if (logits.rank() != 2 || target.shape() != logits.shape()) {
    throw DimensionError("soft_cross_entropy: logits " + to_string(logits.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  Tensor out = make_output({}, tracks({&logits}));
  auto probs = std::make_shared<Buffer>(logits.size());
  auto tgt = std::make_shared<Buffer>(target.data().begin(), target.data().end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = logits.data().data() + r * classes;
    const double mx = *std::max_element(px, px + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(px[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) {
      (*probs)[r * classes + c] = std::exp(px[c] - lse);
      total -= (*tgt)[r * classes + c] * (px[c] - lse);
    }
  }
  out.data()[0] = total / static_cast<double>(rows);
  check_finite("soft_cross_entropy", out);
  if (out.requires_grad()) {
    NodePtr ln = logits.shared(), on = out.shared();
    tape().record("soft_cross_entropy", [ln, on, probs, tgt, rows, classes] {
      if (on->grad.empty()) return;
      const double g = on->grad[0] / static_cast<double>(rows);
      double* gl = ln->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        double mass = 0.0;
        for (std::size_t c = 0; c < classes; ++c) mass += (*tgt)[r * classes + c];
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t i = r * classes + c;
          gl[i] += g * ((*probs)[i] * mass - (*tgt)[i]);
        }
      }
    });
  }
  return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("mse: " + to_string(prediction.shape()) + " vs " + to_string(target.shape()));
  }
  Tensor diff = sub(prediction, target);
  return mean(mul(diff, diff));
}

Tensor mae(const Tensor& prediction, const Tensor& target) {
  require_defined("mae", prediction);
  require_defined("mae", target);
  if (prediction.shape() != target.shape()) {
    throw DimensionError("mae: " + to_string(prediction.shape()) + " vs " + to_string(target.shape()));
  }
  const std::size_t n = prediction.size();
  Tensor out = make_output({}, tracks({&prediction, &target}));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::abs(prediction[i] - target[i]);
  out.data()[0] = total / static_cast<double>(n);
  check_finite("mae", out);
  if (out.requires_grad()) {
    NodePtr pn = prediction.shared(), tn = target.shared(), on = out.shared();
    tape().record("mae", [pn, tn, on, n] {
      if (on->grad.empty()) return;
      const double g = on->grad[0] / static_cast<double>(n);
      double* gp = pn->requires_grad ? pn->grad_buffer().data() : nullptr;
      double* gt = tn->requires_grad ? tn->grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = pn->data[i] - tn->data[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (gp) gp[i] += g * s;
        if (gt) gt[i] -= g * s;
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                 std::size_t heads, std::vector<double>* probs) {
  require_defined("attention", q);
  require_defined("attention", k);
  require_defined("attention", v);
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()));
  }
  const std::size_t batch = q.dim(0);
  const std::size_t sq = q.dim(1);
  const std::size_t sk = k.dim(1);
  const std::size_t width = q.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  if (!key_valid.empty() && key_valid.size() != batch * sk) {
    throw DimensionError("attention: key mask has " + std::to_string(key_valid.size()) + " entries, expected " +
                         std::to_string(batch * sk));
  }
  const std::size_t hd = width / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = make_output(q.shape(), tracks({&q, &k, &v}));
  auto p_all = std::make_shared<Buffer>(batch * heads * sq * sk);
  std::vector<std::uint8_t> mask(key_valid.begin(), key_valid.end());
  // keep: 1 for usable keys; neg_mask: a large negative offset that keeps
  // masked scores out of the row maximum.
  RowMat keep, neg_mask;
  if (!mask.empty()) {
    keep.resize(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(sk));
    for (std::size_t i = 0; i < batch * sk; ++i) keep.data()[i] = mask[i] ? 1.0 : 0.0;
    neg_mask = (keep.array() - 1.0).matrix() * 1e300;
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (!mask.empty()) {
      const auto* m = mask.data() + b * sk;
      if (std::none_of(m, m + sk, [](std::uint8_t f) { return f != 0; })) {
        throw ContractError("attention: batch element " + std::to_string(b) + " has no valid key");
      }
    }
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap qm(q.data().data() + b * sq * width + h * hd, sq, hd, Eigen::OuterStride<>(width));
      ConstStridedMap km(k.data().data() + b * sk * width + h * hd, sk, hd, Eigen::OuterStride<>(width));
      ConstStridedMap vm(v.data().data() + b * sk * width + h * hd, sk, hd, Eigen::OuterStride<>(width));
      MatMap pm(p_all->data() + (b * heads + h) * sq * sk, sq, sk);
      pm.noalias() = qm * km.transpose();
      pm *= scl;
      if (!mask.empty()) pm.rowwise() += neg_mask.row(b);
      pm.colwise() -= pm.rowwise().maxCoeff();
      pm = pm.array().exp().matrix();
      if (!mask.empty()) pm.array().rowwise() *= keep.row(b).array();
      pm.array().colwise() /= pm.rowwise().sum().array();
      StridedMap om(out.data().data() + b * sq * width + h * hd, sq, hd, Eigen::OuterStride<>(width));
      om.noalias() = pm * vm;
    }
  }
  check_finite("attention", out);
  if (probs) probs->assign(p_all->begin(), p_all->end());
  if (out.requires_grad()) {
    NodePtr qn = q.shared(), kn = k.shared(), vn = v.shared(), on = out.shared();
    tape().record("attention", [qn, kn, vn, on, p_all, batch, heads, sq, sk, width, hd, scl] {
      if (on->grad.empty()) return;
      double* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
      double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
      double* gv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
      RowMat dp(sq, sk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t qoff = b * sq * width + h * hd;
          const std::size_t koff = b * sk * width + h * hd;
          ConstStridedMap go(on->grad.data() + qoff, sq, hd, Eigen::OuterStride<>(width));
          ConstStridedMap qm(qn->data.data() + qoff, sq, hd, Eigen::OuterStride<>(width));
          ConstStridedMap km(kn->data.data() + koff, sk, hd, Eigen::OuterStride<>(width));
          ConstStridedMap vm(vn->data.data() + koff, sk, hd, Eigen::OuterStride<>(width));
          ConstMatMap pm(p_all->data() + (b * heads + h) * sq * sk, sq, sk);
          if (gv) StridedMap(gv + koff, sk, hd, Eigen::OuterStride<>(width)).noalias() += pm.transpose() * go;
          if (!gq && !gk) continue;
          dp.noalias() = go * vm.transpose();
          const Eigen::VectorXd dot = dp.cwiseProduct(pm).rowwise().sum();
          dp.colwise() -= dot;
          dp = (dp.array() * pm.array() * scl).matrix();
          if (gq) StridedMap(gq + qoff, sq, hd, Eigen::OuterStride<>(width)).noalias() += dp * km;
          if (gk) StridedMap(gk + koff, sk, hd, Eigen::OuterStride<>(width)).noalias() += dp.transpose() * qm;
        }
      }
    });
  }
  return out;
}

}  // namespace vlmae
