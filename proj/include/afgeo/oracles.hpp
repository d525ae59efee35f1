#pragma once

// Reference implementations used to cross-check the production code.

#include <span>

#include "afgeo/box.hpp"
#include "afgeo/head.hpp"

namespace afgeo::oracle {

/// Enumerates every (location, box) pair; the qualifying box with the
/// smallest area wins, the lowest index among equal areas.
AssignmentTargets brute_force_assign(GridSize grid, const LevelSpec& level, std::span<const Box> boxes, double rho);

}  // namespace afgeo::oracle
