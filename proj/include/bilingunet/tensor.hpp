// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap reference-counted handle; copies alias the same
// storage. Operations record a backward closure on the thread's active Tape
// when any input requires a gradient. Without an active tape nothing is
// recorded, which is how inference runs.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bilingunet/errors.hpp"

namespace bilingunet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_to_string(shape));
    }
    impl_ = std::make_shared<Storage>();
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_to_string(shape));
    }
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_to_string(shape));
    }
    impl_ = std::make_shared<Storage>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }

  // Gradient accumulator, zero-allocated on first use.
  std::span<T> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Same values in fresh storage, outside any gradient graph.
  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(impl_->data));
    return out;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

// Ordered record of the backward closures of executed primitives. Records are
// appended in execution order, so reverse iteration is a valid reverse
// topological order.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void push(Backward fn) { records_.push_back(std::move(fn)); }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every record in reverse order.
  void backward(Tensor<T>& loss);

  // Makes this tape the thread's recording target until the guard dies.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

 private:
  std::vector<Backward> records_;
};

template <typename T>
inline thread_local Tape<T>* active_tape_ = nullptr;

template <typename T>
Tape<T>::~Tape() {
  if (active_tape_<T> == this) active_tape_<T> = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_tape_<T>) {
  active_tape_<T> = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_tape_<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape_<T>;
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss is not on the tape (no input requires a gradient)");
  }
  loss.grad_buffer()[0] += T{1};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  records_.clear();
}

template <typename T>
void backward(Tape<T>& tape, Tensor<T>& loss) {
  tape.backward(loss);
}

namespace detail {

// Returns the active tape when any of `inputs` takes part in differentiation.
template <typename T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
Tape<T>* recording(const std::vector<Tensor<T>>& inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>& t : inputs) {
    if (t.defined() && t.requires_grad()) return tape;
  }
  return nullptr;
}

}  // namespace detail

}  // namespace bilingunet
