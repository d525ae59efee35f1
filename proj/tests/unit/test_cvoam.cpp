#include <cmath>
#include <random>

#include "afgeo/cvoam.hpp"
#include "afgeo/gradcheck.hpp"
#include "afgeo/ops.hpp"
#include "doctest.h"

using namespace afgeo;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return T64::from_vector(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("normalize_gate maps equal scores to exactly one half") {
  auto g = normalize_gate(T64::full({3, 4}, 2.5));
  for (double v : g.values()) CHECK(v == 0.5);
}

TEST_CASE("normalize_gate standardizes then squashes") {
  auto g = normalize_gate(T64::from_vector({2}, {-1.0, 1.0}));
  // mean 0, variance 1
  const double z = 1.0 / std::sqrt(1.0 + kGateEpsilon);
  CHECK(g.values()[1] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-14));
  CHECK(g.values()[0] == doctest::Approx(1.0 / (1.0 + std::exp(z))).epsilon(1e-14));
}

TEST_CASE("spatial gate hand dot product") {
  // q = (1, 0) from a constant query; f_r cell (3, 4).
  auto f_q = T64::from_vector({2, 1, 1}, {1.0, 0.0});
  auto f_r = T64::from_vector({2, 1, 1}, {3.0, 4.0});
  auto g = spatial_gate(f_q, f_r);
  CHECK(g.scores.shape() == Shape{1, 1});
  CHECK(g.scores.item() == 3.0);
  CHECK(g.a1.item() == 0.5);  // one cell standardizes to zero
}

TEST_CASE("spatial gate with spatially constant reference gives constant weights") {
  std::mt19937_64 rng(2);
  auto f_q = random_tensor({3, 4, 4}, rng);
  auto f_r = T64::from_vector({3, 2, 2}, {1, 1, 1, 1, -2, -2, -2, -2, 0.5, 0.5, 0.5, 0.5});
  auto g = spatial_gate(f_q, f_r);
  for (double v : g.a1.values()) CHECK(v == 0.5);
  for (std::size_t i = 0; i < f_r.numel(); ++i) CHECK(g.o1.values()[i] == 0.5 * f_r.values()[i]);
}

TEST_CASE("zero query gives uniform gates") {
  std::mt19937_64 rng(4);
  auto f_q = T64::zeros({3, 4, 4});
  auto f_r = random_tensor({3, 5, 6}, rng);
  auto g1 = spatial_gate(f_q, f_r);
  for (double v : g1.scores.values()) CHECK(v == 0.0);
  for (double v : g1.a1.values()) CHECK(v == 0.5);
  for (std::size_t i = 0; i < f_r.numel(); ++i) CHECK(g1.o1.values()[i] == 0.5 * f_r.values()[i]);
  auto g2 = channel_gate(f_q, f_r);
  for (double v : g2.a2.values()) CHECK(v == 0.5);
}

TEST_CASE("channel gate with constant query sums each reference channel") {
  const double c = 0.75;
  auto f_q = T64::full({2, 3, 3}, c);
  auto f_r = T64::from_vector({2, 2, 2}, {1, 2, 3, 4, -1, 0.5, 2, 0});
  auto g = channel_gate(f_q, f_r);
  CHECK(g.scores.shape() == Shape{2});
  CHECK(g.scores.values()[0] == doctest::Approx(c * 10.0).epsilon(1e-14));
  CHECK(g.scores.values()[1] == doctest::Approx(c * 1.5).epsilon(1e-14));
}

TEST_CASE("channel gate zero reference gives zero output") {
  std::mt19937_64 rng(6);
  auto g = channel_gate(random_tensor({4, 3, 3}, rng), T64::zeros({4, 5, 5}));
  for (double v : g.o2.values()) CHECK(v == 0.0);
}

TEST_CASE("fuse examples") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 2, 2}, rng);
  auto y = random_tensor({2, 2, 2}, rng);
  CHECK(fuse(T64::zeros({2, 2, 2}), x).to_vector() == x.to_vector());
  auto twice = fuse(x, x);
  for (std::size_t i = 0; i < 8; ++i) CHECK(twice.values()[i] == 2 * x.values()[i]);
  auto s = fuse(x, y);
  for (std::size_t i = 0; i < 8; ++i) CHECK(s.values()[i] == x.values()[i] + y.values()[i]);
  CHECK_THROWS_AS(fuse(x, T64::zeros({2, 2, 3})), std::invalid_argument);
}

TEST_CASE("cvoam shapes, bounds and errors") {
  std::mt19937_64 rng(9);
  auto out = cvoam(random_tensor({4, 8, 8}, rng), random_tensor({4, 16, 16}, rng));
  CHECK(out.fused.shape() == Shape{4, 16, 16});
  CHECK(out.spatial.a1.shape() == Shape{16, 16});
  CHECK(out.channel.a2.shape() == Shape{4});
  for (double v : out.spatial.a1.values()) CHECK((v > 0 && v < 1));
  for (double v : out.channel.a2.values()) CHECK((v > 0 && v < 1));
  CHECK_THROWS_AS(cvoam(random_tensor({3, 8, 8}, rng), random_tensor({4, 16, 16}, rng)), std::invalid_argument);
}

TEST_CASE("channel permutation permutes the fused output") {
  std::mt19937_64 rng(10);
  auto f_q = random_tensor({3, 4, 4}, rng);
  auto f_r = random_tensor({3, 6, 6}, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permute = [&](const T64& t) {
    std::vector<T64> parts;
    for (auto p : perm) parts.push_back(slice(t, 0, p, 1));
    return concat(parts, 0);
  };
  auto a = permute(cvoam(f_q, f_r).fused);
  auto b = cvoam(permute(f_q), permute(f_r)).fused;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
}

TEST_CASE("cvoam is differentiable in both inputs") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    auto f_q = random_tensor({3, 4, 4}, rng, true);
    auto f_r = random_tensor({3, 6, 6}, rng, true);
    auto w = random_tensor({3, 6, 6}, rng);
    auto loss = [&] { return sum(mul(cvoam(f_q, f_r).fused, w)); };
    auto result = gradcheck(loss, {{"f_q", f_q}, {"f_r", f_r}});
    CHECK_MESSAGE(result.passed, "seed " << seed << " worst " << result.worst << " rel " << result.max_rel_error);
  }
}
