#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Every op records its inputs
// and a backward closure when any input requires a gradient; backward() walks
// the reachable graph in reverse topological order. Leaf gradients accumulate
// across backward() calls until zero_grad().

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace afgeo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

/// Allocator returning 64-byte aligned storage. Vectorised kernels split a
/// loop into a scalar prologue up to the first aligned element and a SIMD
/// body, so the summation order depends on the buffer address modulo the
/// vector width; fixing the alignment makes results independent of where
/// the allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kAlignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Tensor value and gradient storage.
template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<Buffer<T>> value;
  Buffer<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.size() != value->size()) grad.assign(value->size(), T(0));
    return grad;
  }
};

bool grad_mode_enabled();

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (per thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> values() const;
  /// Writable view of a leaf's storage (optimizer updates, finite differences).
  std::span<T> mutable_values();
  std::vector<T> to_vector() const;
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient values; an untouched tracked tensor reads as all zeros.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this single-element tensor.
  void backward() const;

  /// New leaf sharing this tensor's storage but with its own gradient buffer.
  Tensor alias() const;
  /// Shares storage, never tracks gradients.
  Tensor detach() const;
  Tensor clone() const;

  // Used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

/// Builds an op result. Parents and the backward closure are only retained
/// when grad mode is on and some parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> values,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

}  // namespace afgeo
