#include "afgeo/cvoam.hpp"

#include <stdexcept>

#include "afgeo/ops.hpp"

namespace afgeo {
namespace {

void require_feature_map(const char* op, const char* what, const Shape& s) {
  if (s.size() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0) {
    throw std::invalid_argument(std::string(op) + ": " + what + " must be a non-empty [C,H,W] map, got " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Tensor<T> normalize_gate(const Tensor<T>& scores) {
  auto centred = sub(scores, mean(scores));
  auto var = mean(mul(centred, centred));
  auto z = div(centred, sqrt(shift(var, static_cast<T>(kGateEpsilon))));
  return sigmoid(z);
}

template <typename T>
SpatialGate<T> spatial_gate(const Tensor<T>& f_q, const Tensor<T>& f_r) {
  require_feature_map("spatial_gate", "f_q", f_q.shape());
  require_feature_map("spatial_gate", "f_r", f_r.shape());
  const std::size_t c = f_r.dim(0), h = f_r.dim(1), w = f_r.dim(2);
  if (f_q.dim(0) != c) {
    throw std::invalid_argument("spatial_gate: channel mismatch " + shape_str(f_q.shape()) + " vs " +
                                shape_str(f_r.shape()));
  }
  auto q = reshape(mean(f_q, {1, 2}), {1, c});
  auto scores = reshape(matmul(q, reshape(f_r, {c, h * w})), {h, w});
  auto a1 = normalize_gate(scores);
  auto o1 = mul(reshape(a1, {1, h, w}), f_r);
  return {scores, a1, o1};
}

template <typename T>
ChannelGate<T> channel_gate(const Tensor<T>& f_q, const Tensor<T>& f_r) {
  require_feature_map("channel_gate", "f_q", f_q.shape());
  require_feature_map("channel_gate", "f_r", f_r.shape());
  const std::size_t c = f_r.dim(0), h = f_r.dim(1), w = f_r.dim(2);
  auto m = resize_bilinear(mean(f_q, {0}), h, w);
  auto ref_rows = transpose(reshape(f_r, {c, h * w}));  // (H2*W2) x C
  auto scores = reshape(matmul(reshape(m, {1, h * w}), ref_rows), {c});
  auto a2 = normalize_gate(scores);
  auto o2 = mul(reshape(a2, {c, 1, 1}), f_r);
  return {scores, a2, o2};
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& o1, const Tensor<T>& o2) {
  if (o1.shape() != o2.shape()) {
    throw std::invalid_argument("fuse: shape mismatch " + shape_str(o1.shape()) + " vs " + shape_str(o2.shape()));
  }
  return add(o1, o2);
}

template <typename T>
CvoamOutput<T> cvoam(const Tensor<T>& f_q, const Tensor<T>& f_r) {
  auto s = spatial_gate(f_q, f_r);
  auto ch = channel_gate(f_q, f_r);
  auto fused = fuse(s.o1, ch.o2);
  return {std::move(s), std::move(ch), std::move(fused)};
}

#define AFGEO_INSTANTIATE_CVOAM(T)                                          \
  template Tensor<T> normalize_gate(const Tensor<T>&);                      \
  template SpatialGate<T> spatial_gate(const Tensor<T>&, const Tensor<T>&); \
  template ChannelGate<T> channel_gate(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&);              \
  template CvoamOutput<T> cvoam(const Tensor<T>&, const Tensor<T>&);

AFGEO_INSTANTIATE_CVOAM(float)
AFGEO_INSTANTIATE_CVOAM(double)

}  // namespace afgeo
