#pragma once

#include <functional>
#include <string>
#include <vector>

#include "afgeo/tensor.hpp"

namespace afgeo {

enum class Stencil {
  /// (f(x+h) - f(x-h)) / 2h; truncation error O(h^2).
  kCentral,
  /// (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h; truncation error O(h^4).
  kFivePoint,
};

struct GradCheckOptions {
  double step = 1e-3;
  Stencil stencil = Stencil::kCentral;
  double rel_tol = 1e-4;
  /// Floor on the relative-error denominator so exactly-zero gradients compare absolutely.
  double denominator_floor = 1e-6;
};

struct GradCheckResult {
  bool passed = true;
  std::size_t checked = 0;
  /// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, denominator_floor)
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]: analytic vs numeric"
};

/// Compares backward() gradients of `loss` against finite differences for
/// every element of `inputs`. `loss` is re-evaluated from the current leaf
/// values on each call.
GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Parameter<double>> inputs,
                          const GradCheckOptions& options = {});

}  // namespace afgeo
