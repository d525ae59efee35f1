#include "afgeo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "afgeo/ops.hpp"

namespace afgeo {

double focal_loss(double logit, int target, double alpha, double gamma) {
  // log p = -softplus(-x), log(1-p) = -softplus(x)
  if (target == 1) return alpha * std::exp(-gamma * stable_softplus(logit)) * stable_softplus(-logit);
  return (1.0 - alpha) * std::exp(-gamma * stable_softplus(-logit)) * stable_softplus(logit);
}

double bce_loss(double logit, double target) {
  return target * stable_softplus(-logit) + (1.0 - target) * stable_softplus(logit);
}

double giou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double area_a = std::max(a.area(), kGiouAreaEpsilon);
  const double area_b = std::max(b.area(), kGiouAreaEpsilon);
  const double uni = std::max(area_a + area_b - inter, kGiouAreaEpsilon);
  const double ew = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
  const double eh = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
  const double enclosing = std::max(ew * eh, kGiouAreaEpsilon);
  return inter / uni - (enclosing - uni) / enclosing;
}

double giou_loss(const Box& pred, const Box& gt) { return 1.0 - giou(pred, gt); }

template <typename T>
Tensor<T> giou_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.rank() != 2 || pred.dim(0) != 4 || pred.shape() != gt.shape()) {
    throw std::invalid_argument("giou_loss: expected matching [4,N] boxes, got " + shape_str(pred.shape()) + " and " +
                                shape_str(gt.shape()));
  }
  const auto row = [](const Tensor<T>& t, std::size_t r) { return slice(t, 0, r, 1); };
  const T eps = static_cast<T>(kGiouAreaEpsilon);
  auto px1 = row(pred, 0), py1 = row(pred, 1), px2 = row(pred, 2), py2 = row(pred, 3);
  auto gx1 = row(gt, 0), gy1 = row(gt, 1), gx2 = row(gt, 2), gy2 = row(gt, 3);
  auto iw = clamp_min(sub(minimum(px2, gx2), maximum(px1, gx1)), T(0));
  auto ih = clamp_min(sub(minimum(py2, gy2), maximum(py1, gy1)), T(0));
  auto inter = mul(iw, ih);
  auto area_p = clamp_min(mul(sub(px2, px1), sub(py2, py1)), eps);
  auto area_g = clamp_min(mul(sub(gx2, gx1), sub(gy2, gy1)), eps);
  auto uni = clamp_min(sub(add(area_p, area_g), inter), eps);
  auto ew = sub(maximum(px2, gx2), minimum(px1, gx1));
  auto eh = sub(maximum(py2, gy2), minimum(py1, gy1));
  auto enclosing = clamp_min(mul(ew, eh), eps);
  auto g = sub(div(inter, uni), div(sub(enclosing, uni), enclosing));
  return reshape(shift(neg(g), T(1)), {pred.dim(1)});
}

template <typename T>
LossBreakdown<T> total_loss(std::span<const HeadOutput<T>> outputs, std::span<const AssignmentTargets> targets,
                            const LossWeights& weights) {
  if (outputs.size() != targets.size() || outputs.empty()) {
    throw std::invalid_argument("total_loss: " + std::to_string(outputs.size()) + " outputs for " +
                                std::to_string(targets.size()) + " target levels");
  }
  LossBreakdown<T> out;
  for (const auto& t : targets) out.n_pos += t.n_pos;
  out.n_pos_used = std::max<std::size_t>(out.n_pos, 1);

  Tensor<T> cls_sum, cn_sum, reg_sum;
  auto accumulate = [](Tensor<T>& acc, const Tensor<T>& v) { acc = acc.defined() ? add(acc, v) : v; };
  for (std::size_t li = 0; li < outputs.size(); ++li) {
    const auto& o = outputs[li];
    const auto& t = targets[li];
    const std::size_t hw = t.h * t.w;
    if (o.cls_logits.shape() != Shape{t.h, t.w} || o.ctr_logits.shape() != Shape{t.h, t.w} ||
        o.offsets.shape() != Shape{4, t.h, t.w}) {
      throw std::invalid_argument("total_loss: head output " + shape_str(o.cls_logits.shape()) +
                                  " does not match targets of level " + std::to_string(li));
    }
    std::vector<T> c_star(t.cls_target.begin(), t.cls_target.end());
    auto cls = sigmoid_focal_loss(o.cls_logits, Tensor<T>::from_vector({t.h, t.w}, std::move(c_star)),
                                  static_cast<T>(weights.focal_alpha), static_cast<T>(weights.focal_gamma));
    accumulate(cls_sum, sum(cls));
    if (t.n_pos == 0) continue;

    std::vector<std::size_t> pos;
    for (std::size_t k = 0; k < hw; ++k) {
      if (t.positive_mask[k]) pos.push_back(k);
    }
    const std::size_t n = pos.size();
    std::vector<T> s_star(n);
    std::vector<std::size_t> off_idx(4 * n);
    std::vector<T> anchor(4 * n), gt(4 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pos[i];
      s_star[i] = static_cast<T>(t.ctr_target[k]);
      const double px = (static_cast<double>(k % t.w) + 0.5) * t.stride;
      const double py = (static_cast<double>(k / t.w) + 0.5) * t.stride;
      for (std::size_t side = 0; side < 4; ++side) off_idx[side * n + i] = side * hw + k;
      anchor[i] = static_cast<T>(px);
      anchor[n + i] = static_cast<T>(py);
      anchor[2 * n + i] = static_cast<T>(px);
      anchor[3 * n + i] = static_cast<T>(py);
      gt[i] = static_cast<T>(px - t.box_target[k]);
      gt[n + i] = static_cast<T>(py - t.box_target[hw + k]);
      gt[2 * n + i] = static_cast<T>(px + t.box_target[2 * hw + k]);
      gt[3 * n + i] = static_cast<T>(py + t.box_target[3 * hw + k]);
    }
    auto cn = bce_with_logits(take(o.ctr_logits, pos), Tensor<T>::from_vector({n}, std::move(s_star)));
    accumulate(cn_sum, sum(cn));

    // Decoded boxes: (px - l, py - t, px + r, py + b).
    auto offsets = reshape(take(o.offsets, off_idx), {4, n});
    auto sign = Tensor<T>::from_vector({4, 1}, {T(-1), T(-1), T(1), T(1)});
    auto pred = add(Tensor<T>::from_vector({4, n}, std::move(anchor)), mul(offsets, sign));
    accumulate(reg_sum, sum(giou_loss(pred, Tensor<T>::from_vector({4, n}, std::move(gt)))));
  }

  const T inv = T(1) / static_cast<T>(out.n_pos_used);
  auto cls_term = scale(cls_sum, static_cast<T>(weights.lambda_cls) * inv);
  out.cls_term = static_cast<double>(cls_term.item());
  Tensor<T> total = cls_term;
  if (cn_sum.defined()) {
    auto cn_term = scale(cn_sum, static_cast<T>(weights.lambda_cn) * inv);
    auto reg_term = scale(reg_sum, static_cast<T>(weights.lambda_reg) * inv);
    out.cn_term = static_cast<double>(cn_term.item());
    out.reg_term = static_cast<double>(reg_term.item());
    total = add(add(total, cn_term), reg_term);
  }
  out.total = total;
  return out;
}

template Tensor<float> giou_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> giou_loss(const Tensor<double>&, const Tensor<double>&);
template LossBreakdown<float> total_loss(std::span<const HeadOutput<float>>, std::span<const AssignmentTargets>,
                                         const LossWeights&);
template LossBreakdown<double> total_loss(std::span<const HeadOutput<double>>, std::span<const AssignmentTargets>,
                                          const LossWeights&);

}  // namespace afgeo
