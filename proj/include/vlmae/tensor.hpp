// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with a define-by-run gradient tape.
//
// Every differentiable op in ops.hpp appends one entry to the thread-local
// tape when at least one input requires a gradient and grad mode is on.
// backward() replays the tape in reverse and then clears it.
//
// Gradient contract: backward() ACCUMULATES into the grad buffer of every
// requires_grad tensor it reaches. Call zero_grad() (or Tensor::zero_grad on
// each leaf) between steps to start from zero.
//
// Storage is 64-byte aligned so that vectorised kernels split every buffer
// the same way and results do not depend on where an allocation landed.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vlmae {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;

  // Zero-filled grad buffer of data.size(), allocated on first use.
  std::span<double> grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  // Copy of the values.
  std::vector<double> values() const { return {node_->data.begin(), node_->data.end()}; }
  double item() const;
  double operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  // All-zero view when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values that is not connected to the tape.
  Tensor detach() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& shared() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

class Tape {
 public:
  void record(std::string_view op, std::function<void()> backward_fn);
  // Seeds d(loss)/d(loss) = 1 and replays every entry in reverse order.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::string_view op;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
};

Tape& tape();
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Throws ContractError unless loss holds exactly one value.
void backward(const Tensor& loss);

}  // namespace vlmae
