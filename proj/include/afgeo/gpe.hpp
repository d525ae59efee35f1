#pragma once

// Gaussian position encoding of the query click.
//
// The encoded map is P(i,j) = exp(-|z(i,j) - p|^2 / (2 sigma^2)) over the
// integer grid points z(i,j) = (i,j). sigma is learnable through an
// unconstrained raw parameter: sigma = floor + softplus(raw).

#include <cstddef>

#include "afgeo/tensor.hpp"

namespace afgeo {

/// Click location in the frame of some grid (image pixels or feature cells).
struct ClickPoint {
  double row = 0;
  double col = 0;

  friend bool operator==(const ClickPoint&, const ClickPoint&) = default;
};

struct GpeConfig {
  /// Initial effective sigma in grid cells; <= 0 selects max(H,W)/8 of the encoded grid.
  double sigma_init = 0.0;
  double sigma_floor = 0.5;
};

/// Effective sigma of the encoding for the raw parameter value.
template <typename T>
Tensor<T> effective_sigma(const Tensor<T>& raw_sigma, double floor);

/// Raw parameter value whose effective sigma equals `sigma` (requires sigma > floor).
double raw_sigma_for(double sigma, double floor);

/// Rescales a click by the exact grid ratio; the centre is not rounded.
ClickPoint scale_click(ClickPoint click, std::size_t from_h, std::size_t from_w, std::size_t to_h, std::size_t to_w);

/// H x W encoding map, differentiable with respect to `raw_sigma`.
/// Throws if the click lies outside [0,H) x [0,W).
template <typename T>
Tensor<T> gpe_map(std::size_t h, std::size_t w, ClickPoint click, const Tensor<T>& raw_sigma, double floor);

/// Concatenates `p_map` as an extra channel of `f_q` [C,H,W] and projects
/// back to C channels with the 1x1 kernel `proj` [C, C+1, 1, 1].
template <typename T>
Tensor<T> inject_gpe(const Tensor<T>& f_q, const Tensor<T>& p_map, const Tensor<T>& proj);

}  // namespace afgeo
