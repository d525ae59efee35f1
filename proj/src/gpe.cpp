#include "afgeo/gpe.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "afgeo/ops.hpp"

namespace afgeo {

template <typename T>
Tensor<T> effective_sigma(const Tensor<T>& raw_sigma, double floor) {
  return shift(softplus(raw_sigma), static_cast<T>(floor));
}

double raw_sigma_for(double sigma, double floor) {
  const double excess = sigma - floor;
  if (!(excess > 0.0)) {
    throw std::invalid_argument("gpe: sigma " + std::to_string(sigma) + " must exceed floor " + std::to_string(floor));
  }
  // inverse softplus
  return excess > 20.0 ? excess : std::log(std::expm1(excess));
}

ClickPoint scale_click(ClickPoint click, std::size_t from_h, std::size_t from_w, std::size_t to_h, std::size_t to_w) {
  return {click.row * static_cast<double>(to_h) / static_cast<double>(from_h),
          click.col * static_cast<double>(to_w) / static_cast<double>(from_w)};
}

template <typename T>
Tensor<T> gpe_map(std::size_t h, std::size_t w, ClickPoint click, const Tensor<T>& raw_sigma, double floor) {
  if (h == 0 || w == 0) throw std::invalid_argument("gpe_map: empty grid");
  if (!(click.row >= 0.0 && click.row < static_cast<double>(h) && click.col >= 0.0 &&
        click.col < static_cast<double>(w))) {
    std::ostringstream os;
    os << "gpe_map: click (" << click.row << ", " << click.col << ") outside " << h << "x" << w << " grid";
    throw std::invalid_argument(os.str());
  }
  std::vector<T> neg_sq(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double dr = static_cast<double>(i) - click.row;
      const double dc = static_cast<double>(j) - click.col;
      neg_sq[i * w + j] = static_cast<T>(-(dr * dr + dc * dc));
    }
  }
  auto sigma = effective_sigma(raw_sigma, floor);
  auto two_var = scale(mul(sigma, sigma), T(2));
  return exp(div(Tensor<T>::from_vector({h, w}, std::move(neg_sq)), reshape(two_var, {1})));
}

template <typename T>
Tensor<T> inject_gpe(const Tensor<T>& f_q, const Tensor<T>& p_map, const Tensor<T>& proj) {
  if (f_q.rank() != 3 || p_map.rank() != 2 || p_map.dim(0) != f_q.dim(1) || p_map.dim(1) != f_q.dim(2)) {
    throw std::invalid_argument("inject_gpe: map " + shape_str(p_map.shape()) + " does not match features " +
                                shape_str(f_q.shape()));
  }
  auto stacked = concat<T>({f_q, reshape(p_map, {1, p_map.dim(0), p_map.dim(1)})}, 0);
  return conv2d(stacked, proj, Tensor<T>{}, 1, 0);
}

template Tensor<float> effective_sigma(const Tensor<float>&, double);
template Tensor<double> effective_sigma(const Tensor<double>&, double);
template Tensor<float> gpe_map(std::size_t, std::size_t, ClickPoint, const Tensor<float>&, double);
template Tensor<double> gpe_map(std::size_t, std::size_t, ClickPoint, const Tensor<double>&, double);
template Tensor<float> inject_gpe(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> inject_gpe(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace afgeo
