#pragma once

// Differentiable primitives over afgeo::Tensor. All ops are instantiated for
// float (training) and double (gradient verification).

#include <cstddef>
#include <span>
#include <vector>

#include "afgeo/tensor.hpp"

namespace afgeo {

/// Broadcast shape of two operands under trailing-dimension rules.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Element-wise binary ops, with broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
/// Ties send the whole gradient to `a`.
template <typename T> Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

// Element-wise unary ops.
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// x * sigmoid(x)
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> shift(const Tensor<T>& x, T offset);
template <typename T> Tensor<T> clamp_min(const Tensor<T>& x, T floor);

enum class ReduceKind { kSum, kMean, kMax };

/// Reduces over `axes` (all axes when empty). Reduced extents are dropped
/// unless `keep_dims`, in which case they stay as 1.
template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keep_dims = false);
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keep_dims = false) {
  return reduce(ReduceKind::kSum, x, std::move(axes), keep_dims);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keep_dims = false) {
  return reduce(ReduceKind::kMean, x, std::move(axes), keep_dims);
}

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k]; `bias` may be
/// undefined. Kernel extent must be odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// Non-overlapping average pooling with window and stride `k` on [C,H,W].
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);

/// Corner-aligned bilinear resize of the last two axes (rank 2 or 3 input).
template <typename T> Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
/// Gathers flat element indices into a rank-1 tensor.
template <typename T> Tensor<T> take(const Tensor<T>& x, std::span<const std::size_t> flat_indices);

/// Element-wise sigmoid focal loss; `targets` holds 0/1 and is not differentiated.
template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, T alpha, T gamma);
/// Element-wise binary cross-entropy on logits; `targets` in [0,1].
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& x) { return neg(x); }

/// Numerically stable scalar helpers shared by the loss code.
double stable_softplus(double x);
double stable_sigmoid(double x);

}  // namespace afgeo
