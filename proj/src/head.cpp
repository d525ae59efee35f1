#include "afgeo/head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "afgeo/ops.hpp"

namespace afgeo {

HeadConfig HeadConfig::single_level(double stride) {
  HeadConfig cfg;
  cfg.levels = {LevelSpec{stride, 0.0, std::numeric_limits<double>::infinity()}};
  return cfg;
}

HeadConfig HeadConfig::three_level() {
  HeadConfig cfg;
  cfg.levels = {LevelSpec{8, 0, 64}, LevelSpec{16, 64, 128},
                LevelSpec{32, 128, std::numeric_limits<double>::infinity()}};
  return cfg;
}

void HeadConfig::validate() const {
  if (levels.empty()) throw std::invalid_argument("head config: no levels");
  if (!(radius_rho > 0)) throw std::invalid_argument("head config: radius_rho must be positive");
  double expected = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    if (!(l.stride > 0)) throw std::invalid_argument("head config: level stride must be positive");
    if (l.min_size != expected || !(l.max_size > l.min_size)) {
      throw std::invalid_argument("head config: scale ranges must partition (0, inf) contiguously (level " +
                                  std::to_string(i) + ")");
    }
    expected = l.max_size;
  }
  if (!std::isinf(expected)) throw std::invalid_argument("head config: last scale range must end at infinity");
}

double centerness(double l, double t, double r, double b) {
  return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

AssignmentTargets assign_targets(GridSize grid, const LevelSpec& level, std::span<const Box> gt_boxes, double rho) {
  const std::size_t hw = grid.h * grid.w;
  AssignmentTargets out;
  out.h = grid.h;
  out.w = grid.w;
  out.stride = level.stride;
  out.cls_target.assign(hw, 0.0);
  out.ctr_target.assign(hw, 0.0);
  out.box_target.assign(4 * hw, 0.0);
  out.positive_mask.assign(hw, 0);
  out.assigned_box.assign(hw, -1);

  // Paint boxes from largest to smallest so the smallest-area box wins; among
  // equal areas the lowest index is painted last.
  std::vector<std::size_t> order(gt_boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double aa = gt_boxes[a].area(), ab = gt_boxes[b].area();
    return aa != ab ? aa > ab : a > b;
  });

  const double s = level.stride;
  const double radius = rho * s;
  for (auto bi : order) {
    const Box& box = gt_boxes[bi];
    // Only cells whose centres can fall inside the box need visiting.
    const auto lo = [&](double v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp(std::floor(v / s - 0.5), 0.0, static_cast<double>(n)));
    };
    const auto hi = [&](double v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp(std::ceil(v / s - 0.5) + 1.0, 0.0, static_cast<double>(n)));
    };
    const std::size_t x0 = lo(box.x_min, grid.w), x1 = hi(box.x_max, grid.w);
    const std::size_t y0 = lo(box.y_min, grid.h), y1 = hi(box.y_max, grid.h);
    const double cx = box.center_x(), cy = box.center_y();
    for (std::size_t y = y0; y < y1; ++y) {
      const double py = (static_cast<double>(y) + 0.5) * s;
      for (std::size_t x = x0; x < x1; ++x) {
        const double px = (static_cast<double>(x) + 0.5) * s;
        const double l = px - box.x_min, t = py - box.y_min, r = box.x_max - px, b = box.y_max - py;
        if (std::min({l, t, r, b}) <= 0.0) continue;
        const double dx = px - cx, dy = py - cy;
        if (dx * dx + dy * dy > radius * radius) continue;
        const double extent = std::max({l, t, r, b});
        if (!(extent > level.min_size && extent <= level.max_size)) continue;
        const std::size_t k = y * grid.w + x;
        out.cls_target[k] = 1.0;
        out.positive_mask[k] = 1;
        out.assigned_box[k] = static_cast<int>(bi);
        out.ctr_target[k] = centerness(l, t, r, b);
        out.box_target[k] = l;
        out.box_target[hw + k] = t;
        out.box_target[2 * hw + k] = r;
        out.box_target[3 * hw + k] = b;
      }
    }
  }
  out.n_pos = static_cast<std::size_t>(std::count(out.positive_mask.begin(), out.positive_mask.end(), 1));
  return out;
}

Location argmax_location(std::span<const ScoreMap> levels) {
  bool found = false;
  Location best;
  double best_score = 0.0;
  auto before = [](const Location& a, const Location& b) {
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.level < b.level;
  };
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& m = levels[li];
    for (std::size_t y = 0; y < m.h; ++y) {
      for (std::size_t x = 0; x < m.w; ++x) {
        const double v = m.scores[y * m.w + x];
        if (std::isnan(v)) continue;
        const Location here{li, y, x};
        if (!found || v > best_score || (v == best_score && before(here, best))) {
          best = here;
          best_score = v;
          found = true;
        }
      }
    }
  }
  if (!found) throw std::invalid_argument("argmax_location: no finite score");
  return best;
}

template <typename T>
ScoreMap combined_scores(const HeadOutput<T>& out) {
  ScoreMap m{out.cls_logits.dim(0), out.cls_logits.dim(1), {}};
  auto cls = out.cls_logits.values();
  auto ctr = out.ctr_logits.values();
  m.scores.resize(cls.size());
  for (std::size_t k = 0; k < cls.size(); ++k) {
    m.scores[k] = stable_sigmoid(static_cast<double>(cls[k])) * stable_sigmoid(static_cast<double>(ctr[k]));
  }
  return m;
}

Box box_from_offsets(std::size_t x, std::size_t y, double stride, double l, double t, double r, double b) {
  const double px = (static_cast<double>(x) + 0.5) * stride;
  const double py = (static_cast<double>(y) + 0.5) * stride;
  return {px - l, py - t, px + r, py + b};
}

template <typename T>
DecodedBox decode(std::span<const HeadOutput<T>> levels) {
  std::vector<ScoreMap> maps;
  maps.reserve(levels.size());
  for (const auto& lvl : levels) maps.push_back(combined_scores(lvl));
  const Location at = argmax_location(maps);
  const auto& lvl = levels[at.level];
  const std::size_t hw = maps[at.level].h * maps[at.level].w;
  const std::size_t k = at.y * maps[at.level].w + at.x;
  auto off = lvl.offsets.values();
  DecodedBox out;
  out.box = box_from_offsets(at.x, at.y, lvl.stride, off[k], off[hw + k], off[2 * hw + k], off[3 * hw + k]);
  out.confidence = maps[at.level].scores[k];
  out.location = at;
  return out;
}

template ScoreMap combined_scores(const HeadOutput<float>&);
template ScoreMap combined_scores(const HeadOutput<double>&);
template DecodedBox decode(std::span<const HeadOutput<float>>);
template DecodedBox decode(std::span<const HeadOutput<double>>);

}  // namespace afgeo
