#include "afgeo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace afgeo {

GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Parameter<double>> inputs,
                          const GradCheckOptions& options) {
  for (auto& in : inputs) in.tensor.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    auto g = in.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  double worst_score = -1.0;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto values = inputs[p].tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      const double h = options.step;
      auto at = [&](double offset) {
        values[i] = saved + offset;
        return loss().item();
      };
      double numeric;
      if (options.stencil == Stencil::kCentral) {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      } else {
        numeric = (at(-2 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2 * h)) / (12.0 * h);
      }
      values[i] = saved;
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      if (!(rel < options.rel_tol)) result.passed = false;
      if (rel > worst_score) {
        worst_score = rel;
        std::ostringstream os;
        os << inputs[p].name << '[' << i << "]: analytic " << a << " vs numeric " << numeric;
        result.worst = os.str();
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace afgeo
