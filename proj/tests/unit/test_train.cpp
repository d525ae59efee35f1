#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "afgeo/checkpoint.hpp"
#include "afgeo/data.hpp"
#include "afgeo/train.hpp"
#include "doctest.h"

using namespace afgeo;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.backbone_channels = {4, 8};
  cfg.backbone_strides = {2, 2};
  cfg.head = HeadConfig::single_level(4);
  cfg.query_h = cfg.query_w = 32;
  cfg.reference_h = cfg.reference_w = 64;
  cfg.seed = seed;
  return cfg;
}

std::vector<GeoSample> small_samples(std::size_t n, std::uint64_t seed = 5) {
  SynthConfig sc;
  sc.query_size = 32;
  sc.reference_size = 64;
  sc.min_object = 8;
  sc.max_object = 20;
  return generate_dataset(sc, seed, n);
}

std::vector<float> flat_params(const Model<float>& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST_CASE("sgd without momentum") {
  std::vector<Parameter<float>> p{{"w", Tensor<float>::from_vector({1}, {1.0f}, true)}};
  p[0].tensor.mutable_grad()[0] = 0.5f;
  Sgd opt(0.01, 0.0);
  opt.step(p);
  CHECK(p[0].tensor.item() == doctest::Approx(0.995).epsilon(1e-7));
  CHECK(p[0].tensor.grad()[0] == 0.0f);
  opt.step(p);  // zero gradient: fixed point
  CHECK(p[0].tensor.item() == doctest::Approx(0.995).epsilon(1e-7));
}

TEST_CASE("sgd momentum follows the velocity recursion") {
  std::vector<Parameter<float>> p{{"w", Tensor<float>::from_vector({1}, {2.0f}, true)}};
  Sgd opt(0.1, 0.9);
  const double g = 0.5;
  double v = 0, w = 2.0;
  for (int step = 0; step < 2; ++step) {
    p[0].tensor.mutable_grad()[0] = static_cast<float>(g);
    opt.step(p);
    v = 0.9 * v + g;
    w -= 0.1 * v;
    CHECK(p[0].tensor.item() == doctest::Approx(w).epsilon(1e-6));
  }
  CHECK(w == doctest::Approx(2.0 - 0.1 * 0.5 - 0.1 * 0.95));
}

TEST_CASE("sgd rejects non-finite gradients by parameter name") {
  std::vector<Parameter<float>> p{{"ok", Tensor<float>::from_vector({1}, {1.0f}, true)},
                                  {"head.bad", Tensor<float>::from_vector({2}, {1.0f, 2.0f}, true)}};
  p[0].tensor.mutable_grad()[0] = 1.0f;
  p[1].tensor.mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
  Sgd opt(0.1, 0.9);
  try {
    opt.step(p);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("head.bad") != std::string::npos);
  }
  CHECK(p[0].tensor.item() == 1.0f);
}

TEST_CASE("iou examples and properties") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 10), k(0.2, 5);
  for (int i = 0; i < 200; ++i) {
    Box a{u(rng), u(rng), 0, 0}, b{u(rng), u(rng), 0, 0};
    a.x_max = a.x_min + 0.5 + u(rng), a.y_max = a.y_min + 0.5 + u(rng);
    b.x_max = b.x_min + 0.5 + u(rng), b.y_max = b.y_min + 0.5 + u(rng);
    const double v = iou(a, b);
    CHECK((v >= 0 && v <= 1));
    CHECK(iou(b, a) == v);
    const double s = k(rng), dx = u(rng);
    const Box as{a.x_min * s + dx, a.y_min * s, a.x_max * s + dx, a.y_max * s};
    const Box bs{b.x_min * s + dx, b.y_min * s, b.x_max * s + dx, b.y_max * s};
    CHECK(iou(as, bs) == doctest::Approx(v).epsilon(1e-9));
  }
}

TEST_CASE("accuracy from IoUs") {
  const std::vector<double> ious{0.6, 0.4, 0.5};
  auto r = report_from_ious(ious);
  CHECK(std::abs(r.acc_at_50 - 66.67) <= 0.01);
  CHECK(r.acc_at_25 == 100.0);
  CHECK(r.mean_iou == doctest::Approx(0.5));
  const std::vector<double> perfect{1.0, 1.0};
  auto p = report_from_ious(perfect);
  CHECK(p.acc_at_25 == 100.0);
  CHECK(p.acc_at_50 == 100.0);
  const std::vector<double> boundary{0.25, 0.2499999};
  CHECK(report_from_ious(boundary).acc_at_25 == 50.0);
  CHECK_THROWS_AS(report_from_ious(std::span<const double>{}), std::invalid_argument);
}

TEST_CASE("evaluation is deterministic, ordered and does not touch parameters") {
  Model<float> m(small_config());
  const auto samples = small_samples(6);
  const auto before = flat_params(m);
  const auto r1 = evaluate(m, samples);
  const auto r2 = evaluate(m, samples, 3);
  CHECK(flat_params(m) == before);
  REQUIRE(r1.predictions.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r1.predictions[i].sample_id == samples[i].sample_id);
    CHECK(r1.predictions[i].iou == r2.predictions[i].iou);
  }
  CHECK(r1.acc_at_50 <= r1.acc_at_25);
  CHECK_THROWS_AS(evaluate(m, {}), std::invalid_argument);
  const auto j = to_json(r1);
  CHECK(j.at("count") == 6);
  CHECK(j.at("predictions").size() == 6);
  CHECK(j.contains("acc_at_25"));
  CHECK(j.contains("acc_at_50"));
}

TEST_CASE("output formats") {
  DecodedBox d;
  d.box = {8, 7, 14.005, 15.5};
  d.confidence = 0.83456;
  CHECK(format_prediction_csv("s000001", d) == "s000001,8.00,7.00,14.01,15.50,0.83");
  StepLog log{3, 1.5, 1.0, 0.25, 0.25, 12};
  CHECK(format_step_log(log) == "3\t1.500000\t1.000000\t0.250000\t0.250000\t12");
}

TEST_CASE("identical runs give bit-identical losses") {
  const auto samples = small_samples(16);
  TrainConfig tc;
  tc.epochs = 10;
  tc.max_steps = 11;
  tc.batch_size = 4;
  auto run = [&] {
    Model<float> m(small_config());
    auto steps = train(m, samples, tc).steps;
    return std::make_pair(steps, flat_params(m));
  };
  const auto [a, pa] = run();
  std::vector<std::vector<char>> heap_shift(5, std::vector<char>(13));
  const auto [b, pb] = run();
  REQUIRE(a.size() == 11);
  CHECK(a[0].total == b[0].total);
  CHECK(a[10].total == b[10].total);
  CHECK(a[10].n_pos == b[10].n_pos);
  CHECK(pa == pb);
}

TEST_CASE("loss on a fixed batch decreases at a small learning rate") {
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model<float> m(small_config(seed));
    const auto samples = small_samples(4, 100 + seed);
    std::vector<const GeoSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);
    TrainConfig tc;
    tc.lr = 0.001;
    Sgd opt(tc.lr, tc.momentum);
    std::vector<double> losses;
    for (int step = 0; step < 11; ++step) losses.push_back(train_step(m, opt, batch, tc).total);
    bool strictly = true;
    for (std::size_t i = 1; i < losses.size(); ++i) strictly = strictly && losses[i] < losses[i - 1];
    decreasing += strictly;
  }
  CHECK(decreasing >= 8);
}

TEST_CASE("multi-threaded steps agree with the single-threaded step") {
  const auto samples = small_samples(6);
  std::vector<const GeoSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  TrainConfig tc;
  Model<float> a(small_config()), b(small_config());
  Sgd oa(tc.lr, tc.momentum), ob(tc.lr, tc.momentum);
  const auto la = train_step(a, oa, batch, tc);
  tc.threads = 3;
  const auto lb = train_step(b, ob, batch, tc);
  CHECK(la.total == lb.total);
  const auto pa = flat_params(a), pb = flat_params(b);
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i] == doctest::Approx(pb[i]).epsilon(1e-5));
}

TEST_CASE("training writes logs and checkpoints, and aborts on a non-finite loss") {
  const auto dir = fs::temp_directory_path() / "afgeo_test_train";
  fs::remove_all(dir);
  const auto samples = small_samples(8);
  Model<float> m(small_config());
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  std::ostringstream log;
  TrainOutputs out;
  out.checkpoint_dir = dir;
  out.logs = {&log};
  auto result = train(m, samples, tc, out);
  CHECK(result.epochs_completed == 2);
  CHECK(result.steps.size() == 4);
  CHECK(fs::exists(dir / "epoch_001.afgeo"));
  CHECK(fs::exists(dir / "epoch_002.afgeo"));
  CHECK(fs::exists(dir / "latest.json"));
  std::istringstream lines(log.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 5);
    ++count;
  }
  CHECK(count == 4);

  const auto saved = flat_params(load_model<float>(dir / "latest.afgeo"));
  CHECK(saved == flat_params(m));

  // Poison the model: the next step has a non-finite loss.
  for (auto& v : m.parameters().back().tensor.mutable_values()) v = std::numeric_limits<float>::infinity();
  try {
    train(m, samples, tc, out);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
  }
  CHECK(flat_params(load_model<float>(dir / "latest.afgeo")) == saved);
}

TEST_CASE("step decay schedule") {
  TrainConfig tc;
  CHECK(tc.lr_at_epoch(39) == 0.01);
  tc.lr_decay_epochs = 10;
  tc.lr_decay_factor = 0.5;
  CHECK(tc.lr_at_epoch(9) == 0.01);
  CHECK(tc.lr_at_epoch(10) == doctest::Approx(0.005));
  CHECK(tc.lr_at_epoch(25) == doctest::Approx(0.0025));
  tc.lr = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("AFGEO_THREADS parsing") {
  unsetenv("AFGEO_THREADS");
  CHECK(threads_from_env() == 1);
  setenv("AFGEO_THREADS", "4", 1);
  CHECK(threads_from_env() == 4);
  setenv("AFGEO_THREADS", "0", 1);
  CHECK_THROWS_AS(threads_from_env(), std::invalid_argument);
  setenv("AFGEO_THREADS", "2x", 1);
  CHECK_THROWS_AS(threads_from_env(), std::invalid_argument);
  unsetenv("AFGEO_THREADS");
}
