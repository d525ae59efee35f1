#pragma once

// Training objective: focal classification loss over every location, plus
// centerness BCE and GIoU regression over positive locations, each divided
// by max(N_pos, 1).

#include <cstddef>
#include <span>

#include "afgeo/box.hpp"
#include "afgeo/head.hpp"
#include "afgeo/tensor.hpp"

namespace afgeo {

struct LossWeights {
  double lambda_cls = 1.0;
  double lambda_cn = 1.0;
  double lambda_reg = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double cls_term = 0, cn_term = 0, reg_term = 0;
  std::size_t n_pos = 0;       // positives across all levels
  std::size_t n_pos_used = 1;  // max(n_pos, 1)
};

inline constexpr double kGiouAreaEpsilon = 1e-9;

// Scalar forms.
double focal_loss(double logit, int target, double alpha, double gamma);
double bce_loss(double logit, double target);
double giou(const Box& pred, const Box& gt);
/// 1 - GIoU, with areas clamped at kGiouAreaEpsilon.
double giou_loss(const Box& pred, const Box& gt);

/// Per-box GIoU loss for boxes stored as [4,N] rows (x_min, y_min, x_max, y_max).
template <typename T>
Tensor<T> giou_loss(const Tensor<T>& pred, const Tensor<T>& gt);

template <typename T>
LossBreakdown<T> total_loss(std::span<const HeadOutput<T>> outputs, std::span<const AssignmentTargets> targets,
                            const LossWeights& weights);

}  // namespace afgeo
