#include <cmath>
#include <random>

#include "afgeo/gradcheck.hpp"
#include "afgeo/losses.hpp"
#include "afgeo/ops.hpp"
#include "doctest.h"

using namespace afgeo;
using T64 = Tensor<double>;

namespace {

HeadOutput<double> make_output(std::size_t h, std::size_t w, double stride, std::vector<double> cls,
                               std::vector<double> ctr, std::vector<double> offsets, bool requires_grad = false) {
  return {T64::from_vector({h, w}, std::move(cls), requires_grad),
          T64::from_vector({h, w}, std::move(ctr), requires_grad),
          T64::from_vector({4, h, w}, std::move(offsets), requires_grad), stride};
}

// A 3x3 stride-8 level whose only positive is the centre cell (offsets 8,8,8,8).
const Box kCentreBox{4, 4, 20, 20};

}  // namespace

TEST_CASE("focal loss spot value") {
  const double v = focal_loss(std::log(9.0), 1, 0.25, 2.0);  // p = 0.9
  CHECK(std::abs(v - 0.25 * 0.01 * -std::log(0.9)) < 1e-12);
  CHECK(std::abs(v - 2.634e-4) < 1e-6);
}

TEST_CASE("focal loss with gamma 0 and alpha 0.5 is half of BCE") {
  for (double logit = -30; logit <= 30; logit += 0.37) {
    for (int target : {0, 1}) {
      CHECK(focal_loss(logit, target, 0.5, 0.0) == doctest::Approx(0.5 * bce_loss(logit, target)).epsilon(1e-12));
    }
  }
}

TEST_CASE("focal and BCE limits") {
  CHECK(focal_loss(60.0, 1, 0.25, 2.0) < 1e-20);
  CHECK(focal_loss(-60.0, 0, 0.25, 2.0) < 1e-20);
  CHECK(bce_loss(0.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(bce_loss(60.0, 1.0) < 1e-20);
  CHECK(std::isfinite(focal_loss(-800.0, 1, 0.25, 2.0)));
  CHECK(std::isfinite(bce_loss(800.0, 0.0)));
}

TEST_CASE("GIoU spot values") {
  CHECK(std::abs(giou({0, 0, 2, 2}, {1, 1, 3, 3}) - (-5.0 / 63.0)) < 1e-12);
  CHECK(std::abs(giou_loss({0, 0, 2, 2}, {1, 1, 3, 3}) - (1.0 + 5.0 / 63.0)) < 1e-12);
  CHECK(std::abs(giou_loss({0, 0, 2, 2}, {1, 1, 3, 3}) - 1.0794) < 1e-4);
  CHECK(std::abs(giou({1, 1, 3, 3}, {0, 0, 4, 4}) - 0.25) < 1e-12);
  CHECK(std::abs(giou_loss({1, 1, 3, 3}, {0, 0, 4, 4}) - 0.75) < 1e-12);
  CHECK(giou_loss({1, 2, 5, 7}, {1, 2, 5, 7}) == doctest::Approx(0.0));
}

TEST_CASE("GIoU is scale invariant and zero only for equal boxes") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 50), s(0.1, 10);
  for (int i = 0; i < 200; ++i) {
    Box a{u(rng), u(rng), 0, 0}, b{u(rng), u(rng), 0, 0};
    a.x_max = a.x_min + 1 + u(rng), a.y_max = a.y_min + 1 + u(rng);
    b.x_max = b.x_min + 1 + u(rng), b.y_max = b.y_min + 1 + u(rng);
    const double k = s(rng);
    const Box ak{a.x_min * k, a.y_min * k, a.x_max * k, a.y_max * k}, bk{b.x_min * k, b.y_min * k, b.x_max * k, b.y_max * k};
    CHECK(giou_loss(ak, bk) == doctest::Approx(giou_loss(a, b)).epsilon(1e-9));
    CHECK(giou_loss(a, b) > 0);
    CHECK(giou_loss(a, b) <= 2.0);
  }
}

TEST_CASE("degenerate predicted box gives a finite loss") {
  const double v = giou_loss({3, 3, 3, 3}, {0, 0, 4, 4});
  CHECK(std::isfinite(v));
  CHECK(v > 0.9);
}

TEST_CASE("tensor GIoU loss matches the scalar form") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 20);
  const std::size_t n = 7;
  std::vector<double> p(4 * n), g(4 * n);
  std::vector<Box> pb, gb;
  for (std::size_t i = 0; i < n; ++i) {
    Box a{u(rng), u(rng), 0, 0}, b{u(rng), u(rng), 0, 0};
    a.x_max = a.x_min + 1 + u(rng), a.y_max = a.y_min + 1 + u(rng);
    b.x_max = b.x_min + 1 + u(rng), b.y_max = b.y_min + 1 + u(rng);
    pb.push_back(a), gb.push_back(b);
    p[i] = a.x_min, p[n + i] = a.y_min, p[2 * n + i] = a.x_max, p[3 * n + i] = a.y_max;
    g[i] = b.x_min, g[n + i] = b.y_min, g[2 * n + i] = b.x_max, g[3 * n + i] = b.y_max;
  }
  auto out = giou_loss(T64::from_vector({4, n}, p), T64::from_vector({4, n}, g));
  REQUIRE(out.shape() == Shape{n});
  for (std::size_t i = 0; i < n; ++i) CHECK(out.values()[i] == doctest::Approx(giou_loss(pb[i], gb[i])).epsilon(1e-12));
}

TEST_CASE("total loss with no positives") {
  const std::vector<double> cls{-1, 0.5, 2, -3};
  auto out = make_output(2, 2, 8, cls, {0, 0, 0, 0}, std::vector<double>(16, 1.0));
  AssignmentTargets t = assign_targets({2, 2}, LevelSpec{}, std::span<const Box>{}, 1.5);
  std::vector<HeadOutput<double>> outs{out};
  auto l = total_loss<double>(outs, std::span(&t, 1), LossWeights{});
  CHECK(l.n_pos == 0);
  CHECK(l.n_pos_used == 1);
  CHECK(l.cn_term == 0.0);
  CHECK(l.reg_term == 0.0);
  double expected = 0;
  for (double c : cls) expected += focal_loss(c, 0, 0.25, 2.0);
  CHECK(l.cls_term == doctest::Approx(expected).epsilon(1e-12));
  CHECK(l.total.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("total loss hand evaluation with one positive") {
  const LevelSpec level{8, 0, std::numeric_limits<double>::infinity()};
  auto t = assign_targets({3, 3}, level, std::span(&kCentreBox, 1), 1.5);
  REQUIRE(t.n_pos == 1);
  REQUIRE(t.positive_mask[4] == 1);
  std::vector<double> cls{-2, -1, 0, 1, 0.3, -0.5, 2, -4, 0.7};
  std::vector<double> ctr(9, 0.0);
  ctr[4] = 0.8;
  std::vector<double> offsets(36, 1.0);
  const double l = 6, tt = 9, r = 10, b = 7;
  offsets[4] = l, offsets[9 + 4] = tt, offsets[18 + 4] = r, offsets[27 + 4] = b;
  std::vector<HeadOutput<double>> outs{make_output(3, 3, 8, cls, ctr, offsets)};
  auto loss = total_loss<double>(outs, std::span(&t, 1), LossWeights{});

  double focal = 0;
  for (std::size_t k = 0; k < 9; ++k) focal += focal_loss(cls[k], k == 4 ? 1 : 0, 0.25, 2.0);
  const double cn = bce_loss(0.8, 1.0);
  const double reg = giou_loss(Box{12 - l, 12 - tt, 12 + r, 12 + b}, kCentreBox);
  CHECK(loss.cls_term == doctest::Approx(focal).epsilon(1e-12));
  CHECK(loss.cn_term == doctest::Approx(cn).epsilon(1e-12));
  CHECK(loss.reg_term == doctest::Approx(reg).epsilon(1e-12));
  CHECK(loss.total.item() == doctest::Approx(focal + cn + reg).epsilon(1e-12));

  LossWeights w;
  w.lambda_cls = 2, w.lambda_cn = 0.5, w.lambda_reg = 3;
  auto weighted = total_loss<double>(outs, std::span(&t, 1), w);
  CHECK(weighted.total.item() == doctest::Approx(2 * focal + 0.5 * cn + 3 * reg).epsilon(1e-12));
}

TEST_CASE("terms are normalised by the number of positives") {
  const Box big{0, 0, 48, 48};
  auto t = assign_targets({6, 6}, LevelSpec{}, std::span(&big, 1), 1.5);
  REQUIRE(t.n_pos > 1);
  std::vector<HeadOutput<double>> outs{make_output(6, 6, 8, std::vector<double>(36, 0.1), std::vector<double>(36, 0.2),
                                                   std::vector<double>(144, 10.0))};
  auto l = total_loss<double>(outs, std::span(&t, 1), LossWeights{});
  double focal = 0;
  for (std::size_t k = 0; k < 36; ++k) focal += focal_loss(0.1, t.positive_mask[k], 0.25, 2.0);
  CHECK(l.cls_term == doctest::Approx(focal / static_cast<double>(t.n_pos)).epsilon(1e-12));
}

TEST_CASE("perfect predictions drive the total towards zero") {
  auto t = assign_targets({3, 3}, LevelSpec{}, std::span(&kCentreBox, 1), 1.5);
  std::vector<double> cls(9, -40.0), ctr(9, 0.0), offsets(36, 1.0);
  cls[4] = 40.0;
  ctr[4] = 40.0;  // s* = 1
  for (std::size_t c = 0; c < 4; ++c) offsets[c * 9 + 4] = 8.0;
  std::vector<HeadOutput<double>> outs{make_output(3, 3, 8, cls, ctr, offsets)};
  auto l = total_loss<double>(outs, std::span(&t, 1), LossWeights{});
  CHECK(l.total.item() < 1e-12);
  CHECK(l.total.item() >= 0.0);
}

TEST_CASE("total loss gradient matches finite differences") {
  const std::vector<Box> boxes{{3, 5, 30, 26}, {10, 12, 20, 20}};
  const HeadConfig head = HeadConfig::single_level(8);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, 1);
    std::uniform_real_distribution<double> off(2, 14);
    std::vector<double> cls(16), ctr(16), offsets(64);
    for (auto& v : cls) v = n(rng);
    for (auto& v : ctr) v = n(rng);
    for (auto& v : offsets) v = off(rng);
    auto out = make_output(4, 4, 8, cls, ctr, offsets, true);
    auto t = assign_targets({4, 4}, head.levels[0], boxes, 2.0);
    REQUIRE(t.n_pos > 0);
    std::vector<HeadOutput<double>> outs{out};
    auto loss = [&] { return total_loss<double>(outs, std::span(&t, 1), LossWeights{}).total; };
    auto r = gradcheck(loss, {{"cls", out.cls_logits}, {"ctr", out.ctr_logits}, {"offsets", out.offsets}});
    CHECK_MESSAGE(r.passed, "seed " << seed << ": " << r.worst);
  }
}

TEST_CASE("mismatched targets are rejected") {
  auto t = assign_targets({3, 3}, LevelSpec{}, std::span(&kCentreBox, 1), 1.5);
  std::vector<HeadOutput<double>> outs{make_output(2, 2, 8, std::vector<double>(4), std::vector<double>(4),
                                                   std::vector<double>(16, 1.0))};
  CHECK_THROWS_AS(total_loss<double>(outs, std::span(&t, 1), LossWeights{}), std::invalid_argument);
  CHECK_THROWS_AS(total_loss<double>(outs, std::span<const AssignmentTargets>{}, LossWeights{}),
                  std::invalid_argument);
}
