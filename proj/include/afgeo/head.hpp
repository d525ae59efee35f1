#pragma once

// Anchor-free localization head: target assignment and decoding.
//
// Grid cell (x,y) of a level with stride s sits at image point
// ((x+0.5)s, (y+0.5)s). Offsets (l,t,r,b) are distances from that point to
// the left, top, right and bottom box sides, in image pixels.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "afgeo/box.hpp"
#include "afgeo/tensor.hpp"

namespace afgeo {

/// One feature level: stride in pixels and the (min, max] range of
/// max(l,t,r,b) it is responsible for.
struct LevelSpec {
  double stride = 8.0;
  double min_size = 0.0;
  double max_size = std::numeric_limits<double>::infinity();
};

struct HeadConfig {
  std::vector<LevelSpec> levels{LevelSpec{}};
  /// Positive-sampling disk radius, in multiples of the level stride.
  double radius_rho = 1.5;

  static HeadConfig single_level(double stride = 8.0);
  /// Strides 8/16/32 with ranges (0,64], (64,128], (128,inf).
  static HeadConfig three_level();
  /// Throws unless the scale ranges partition (0, inf) contiguously.
  void validate() const;
};

struct GridSize {
  std::size_t h = 0;
  std::size_t w = 0;
};

struct AssignmentTargets {
  std::size_t h = 0, w = 0;
  double stride = 0;
  std::vector<double> cls_target;           // c*, H*W
  std::vector<double> ctr_target;           // s*, H*W (0 off the positive set)
  std::vector<double> box_target;           // 4 planes (l*,t*,r*,b*), each H*W
  std::vector<std::uint8_t> positive_mask;  // H*W
  std::vector<int> assigned_box;            // winning box index or -1
  std::size_t n_pos = 0;

  bool operator==(const AssignmentTargets&) const = default;
};

double centerness(double l, double t, double r, double b);

AssignmentTargets assign_targets(GridSize grid, const LevelSpec& level, std::span<const Box> gt_boxes, double rho);

template <typename T>
struct HeadOutput {
  Tensor<T> cls_logits;  // [H,W]
  Tensor<T> ctr_logits;  // [H,W]
  Tensor<T> offsets;     // [4,H,W], (l,t,r,b) >= 0 in pixels
  double stride = 0;
};

struct ScoreMap {
  std::size_t h = 0, w = 0;
  std::vector<double> scores;
};

struct Location {
  std::size_t level = 0, y = 0, x = 0;
  bool operator==(const Location&) const = default;
};

/// Arg-max over all levels, skipping NaNs. Exact ties go to the smallest y,
/// then smallest x, then lowest level. Throws if no score is finite or all are NaN.
Location argmax_location(std::span<const ScoreMap> levels);

struct DecodedBox {
  Box box;
  double confidence = 0;
  Location location;
};

/// sigmoid(cls) * sigmoid(ctr) per location.
template <typename T>
ScoreMap combined_scores(const HeadOutput<T>& out);

/// Top-1 box at the location of highest combined confidence.
template <typename T>
DecodedBox decode(std::span<const HeadOutput<T>> levels);

/// Box implied by offsets (l,t,r,b) at cell (x,y) of a level.
Box box_from_offsets(std::size_t x, std::size_t y, double stride, double l, double t, double r, double b);

}  // namespace afgeo
