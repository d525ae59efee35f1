#include "afgeo/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace afgeo::oracle {

AssignmentTargets brute_force_assign(GridSize grid, const LevelSpec& level, std::span<const Box> boxes, double rho) {
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
  const double s = level.stride;
  for (std::size_t y = 0; y < grid.h; ++y) {
    for (std::size_t x = 0; x < grid.w; ++x) {
      const double px = (static_cast<double>(x) + 0.5) * s, py = (static_cast<double>(y) + 0.5) * s;
      int best = -1;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Box& b = boxes[i];
        const double l = px - b.x_min, t = py - b.y_min, r = b.x_max - px, bo = b.y_max - py;
        const bool inside = l > 0 && t > 0 && r > 0 && bo > 0;
        const double dx = px - b.center_x(), dy = py - b.center_y();
        const bool in_disk = dx * dx + dy * dy <= (rho * s) * (rho * s);
        const double m = std::max(std::max(l, t), std::max(r, bo));
        const bool in_range = m > level.min_size && m <= level.max_size;
        if (inside && in_disk && in_range && (best < 0 || b.area() < boxes[static_cast<std::size_t>(best)].area())) {
          best = static_cast<int>(i);
        }
      }
      if (best < 0) continue;
      const Box& b = boxes[static_cast<std::size_t>(best)];
      const double l = px - b.x_min, t = py - b.y_min, r = b.x_max - px, bo = b.y_max - py;
      const std::size_t k = y * grid.w + x;
      out.cls_target[k] = 1.0;
      out.positive_mask[k] = 1;
      out.assigned_box[k] = best;
      out.ctr_target[k] = std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, bo) / std::max(t, bo)));
      out.box_target[k] = l;
      out.box_target[hw + k] = t;
      out.box_target[2 * hw + k] = r;
      out.box_target[3 * hw + k] = bo;
      ++out.n_pos;
    }
  }
  return out;
}

}  // namespace afgeo::oracle
