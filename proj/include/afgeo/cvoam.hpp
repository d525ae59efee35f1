#pragma once

// Cross-view object association: two parameter-free gates that re-weight the
// reference features with query-derived spatial and channel weights.

#include "afgeo/tensor.hpp"

namespace afgeo {

inline constexpr double kGateEpsilon = 1e-5;

/// Standardizes scores over all their elements (population variance plus
/// kGateEpsilon) and squashes them with the logistic function. All-equal
/// scores map to exactly 0.5.
template <typename T>
Tensor<T> normalize_gate(const Tensor<T>& scores);

template <typename T>
struct SpatialGate {
  Tensor<T> scores;  // [H2,W2], <f_r(:,i,j), spatial mean of f_q>
  Tensor<T> a1;      // [H2,W2]
  Tensor<T> o1;      // [C,H2,W2]
};

template <typename T>
struct ChannelGate {
  Tensor<T> scores;  // [C], resized channel-mean map of f_q against each f_r channel
  Tensor<T> a2;      // [C]
  Tensor<T> o2;      // [C,H2,W2]
};

template <typename T>
struct CvoamOutput {
  SpatialGate<T> spatial;
  ChannelGate<T> channel;
  Tensor<T> fused;
};

/// f_q [C,H1,W1], f_r [C,H2,W2].
template <typename T>
SpatialGate<T> spatial_gate(const Tensor<T>& f_q, const Tensor<T>& f_r);

template <typename T>
ChannelGate<T> channel_gate(const Tensor<T>& f_q, const Tensor<T>& f_r);

/// Element-wise sum; shapes must match exactly.
template <typename T>
Tensor<T> fuse(const Tensor<T>& o1, const Tensor<T>& o2);

template <typename T>
CvoamOutput<T> cvoam(const Tensor<T>& f_q, const Tensor<T>& f_r);

}  // namespace afgeo
