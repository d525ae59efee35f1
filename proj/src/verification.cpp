#include "afgeo/verification.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "afgeo/box.hpp"
#include "afgeo/data.hpp"
#include "afgeo/gpe.hpp"
#include "afgeo/gradcheck.hpp"
#include "afgeo/head.hpp"
#include "afgeo/losses.hpp"
#include "afgeo/oracles.hpp"
#include "afgeo/train.hpp"

namespace afgeo::verify {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fixed(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Uniform random box inside [0, extent)^2, optionally with integer corners.
Box random_box(std::mt19937_64& rng, double extent, bool integral) {
  std::uniform_real_distribution<double> u(0, extent);
  double x0 = u(rng), x1 = u(rng), y0 = u(rng), y1 = u(rng);
  if (integral) {
    x0 = std::floor(x0), x1 = std::floor(x1), y0 = std::floor(y0), y1 = std::floor(y1);
  }
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  return {x0, y0, x1 + 1, y1 + 1};
}

SynthConfig synth_for(const ModelConfig& cfg) {
  SynthConfig sc;
  sc.query_size = cfg.query_h;
  sc.reference_size = cfg.reference_h;
  const double scale = static_cast<double>(cfg.reference_h) / 128.0;
  sc.min_object *= scale;
  sc.max_object *= scale;
  return sc;
}

}  // namespace

CheckResult run_check(const std::string& name, const std::function<CheckResult()>& body) {
  const auto start = Clock::now();
  CheckResult result;
  try {
    result = body();
  } catch (const std::exception& e) {
    result.passed = false;
    result.detail = std::string("error: ") + e.what();
  }
  result.name = name;
  result.seconds = seconds_since(start);
  return result;
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.backbone_channels = {4, 8};
  cfg.backbone_strides = {2, 2};
  cfg.head = HeadConfig::single_level(4);
  cfg.query_h = cfg.query_w = 32;
  cfg.reference_h = cfg.reference_w = 64;
  cfg.seed = 1;
  return cfg;
}

CheckResult check_gradients() {
  const ModelConfig cfg = tiny_model_config();
  Model<double> model(cfg);
  const GeoSample sample = generate_sample(synth_for(cfg), 1, 0);
  const auto targets = sample_targets(cfg, sample);
  auto loss = [&] { return total_loss<double>(model.forward(sample), targets, LossWeights{}).total; };
  GradCheckOptions options;
  options.step = 1e-3;
  options.stencil = Stencil::kFivePoint;
  options.rel_tol = 1e-4;
  const auto r = gradcheck(loss, model.parameters(), options);
  CheckResult out;
  out.passed = r.passed;
  out.detail = std::to_string(r.checked) + " elements, max rel error " + sci(r.max_rel_error);
  if (!r.passed) out.detail += " (worst " + r.worst + ")";
  return out;
}

CheckResult check_assignment_oracle(std::size_t configs) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> grid_dist(4, 32), count(1, 5);
  std::uniform_real_distribution<double> rho_dist(1.0, 3.0);
  const auto three = HeadConfig::three_level();
  std::size_t positives = 0;
  for (std::size_t trial = 0; trial < configs; ++trial) {
    const GridSize grid{grid_dist(rng), grid_dist(rng)};
    const LevelSpec level = trial % 2 ? LevelSpec{8, 0, std::numeric_limits<double>::infinity()}
                                      : three.levels[(trial / 2) % 3];
    const double extent = static_cast<double>(std::max(grid.h, grid.w)) * level.stride;
    std::vector<Box> boxes;
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) boxes.push_back(random_box(rng, extent, trial % 3 == 0));
    if (trial % 5 == 0 && n >= 2) boxes[1] = {boxes[0].x_min + 1, boxes[0].y_min, boxes[0].x_max + 1, boxes[0].y_max};
    const double rho = rho_dist(rng);
    const auto fast = assign_targets(grid, level, boxes, rho);
    const auto slow = oracle::brute_force_assign(grid, level, boxes, rho);
    if (!(fast == slow)) return {"", false, "mismatch on configuration " + std::to_string(trial), 0};
    positives += fast.n_pos;
  }
  return {"", positives > 0,
          std::to_string(configs) + " configurations, " + std::to_string(positives) + " positives identical", 0};
}

CheckResult check_decode_round_trip(std::size_t boxes) {
  std::mt19937_64 rng(77);
  const LevelSpec level{8, 0, std::numeric_limits<double>::infinity()};
  std::size_t checked = 0;
  double worst = 0;
  for (std::size_t trial = 0; trial < boxes; ++trial) {
    const Box gt = random_box(rng, 120, false);
    const auto t = assign_targets({16, 16}, level, std::span(&gt, 1), 1.5);
    const std::size_t n = t.h * t.w;
    for (std::size_t k = 0; k < n; ++k) {
      if (!t.positive_mask[k]) continue;
      const Box d = box_from_offsets(k % t.w, k / t.w, t.stride, t.box_target[k], t.box_target[n + k],
                                     t.box_target[2 * n + k], t.box_target[3 * n + k]);
      worst = std::max({worst, std::abs(d.x_min - gt.x_min), std::abs(d.y_min - gt.y_min),
                        std::abs(d.x_max - gt.x_max), std::abs(d.y_max - gt.y_max)});
      ++checked;
    }
  }
  return {"", checked > 0 && worst < 1e-6,
          std::to_string(boxes) + " boxes, " + std::to_string(checked) + " positives, max error " + sci(worst), 0};
}

CheckResult check_spot_values() {
  struct Spot {
    const char* what;
    double got, want;
  };
  const auto raw = Tensor<double>::from_vector({1}, {raw_sigma_for(1.0, 0.5)}, false);
  const auto p = gpe_map<double>(3, 3, {1, 1}, raw, 0.5);
  const Spot spots[] = {
      {"GIoU disjoint-overlap", giou({0, 0, 2, 2}, {1, 1, 3, 3}), -5.0 / 63.0},
      {"GIoU nested", giou({1, 1, 3, 3}, {0, 0, 4, 4}), 0.25},
      {"centerness", centerness(1, 2, 4, 2), 0.5},
      {"focal", focal_loss(std::log(9.0), 1, 0.25, 2.0), 2.634e-4},
      {"GPE neighbour", p.at({1, 2}), std::exp(-0.5)},
      {"GPE diagonal", p.at({0, 0}), std::exp(-1.0)},
  };
  CheckResult out{"", true, "", 0};
  double worst = 0;
  for (const auto& s : spots) {
    const double err = std::abs(s.got - s.want);
    worst = std::max(worst, err);
    if (!(err < 1e-6)) {
      out.passed = false;
      out.detail += std::string(out.detail.empty() ? "" : "; ") + s.what + " = " + std::to_string(s.got) +
                    " (want " + std::to_string(s.want) + ")";
    }
  }
  if (out.passed) out.detail = std::to_string(std::size(spots)) + " values, max error " + sci(worst);
  return out;
}

std::vector<std::string> census_violations(const std::map<std::string, std::size_t>& census) {
  std::vector<std::string> problems;
  const auto sigma = census.find("gpe.sigma");
  if (sigma == census.end()) {
    problems.push_back("gpe.sigma missing");
  } else if (sigma->second != 1) {
    problems.push_back("gpe.sigma has " + std::to_string(sigma->second) + " elements");
  }
  for (const auto& [name, count] : census) {
    if (name.rfind("cvoam.", 0) == 0) problems.push_back("trainable CVOAM parameter " + name);
  }
  return problems;
}

CheckResult check_census(const ModelConfig& cfg) {
  const Model<float> model(cfg);
  return check_census(param_census<float>(model.parameters()));
}

CheckResult check_census(const std::map<std::string, std::size_t>& census) {
  const auto problems = census_violations(census);
  std::size_t total = 0;
  for (const auto& [name, count] : census) total += count;
  if (problems.empty()) {
    return {"", true, "gpe.sigma = 1, cvoam.* = 0, " + std::to_string(total) + " parameters", 0};
  }
  std::string detail;
  for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  return {"", false, detail, 0};
}

CheckResult check_accuracy_metric() {
  const std::vector<double> ious{0.6, 0.4, 0.5};
  const auto r = report_from_ious(ious);
  const bool ok = std::abs(r.acc_at_50 - 66.67) <= 0.01 && r.acc_at_25 == 100.0;
  return {"", ok, "acc@0.5 = " + fixed(r.acc_at_50) + ", acc@0.25 = " + fixed(r.acc_at_25), 0};
}

CheckResult check_determinism() {
  const ModelConfig cfg;
  const auto samples = generate_dataset(synth_for(cfg), 0, 16);
  TrainConfig tc;
  tc.max_steps = 11;
  auto run = [&] {
    Model<float> model(cfg);
    return train(model, samples, tc).steps;
  };
  const auto a = run(), b = run();
  if (a.size() < 11 || b.size() < 11) return {"", false, "fewer than 11 steps ran", 0};
  const bool ok = a[0].total == b[0].total && a[10].total == b[10].total;
  char buf[160];
  std::snprintf(buf, sizeof buf, "step 0: %.9g vs %.9g, step 10: %.9g vs %.9g", a[0].total, b[0].total, a[10].total,
                b[10].total);
  return {"", ok, buf, 0};
}

CheckResult check_loss_decrease(std::size_t steps) {
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig cfg = tiny_model_config();
    cfg.seed = seed;
    Model<float> model(cfg);
    const auto samples = generate_dataset(synth_for(cfg), 100 + seed, 4);
    std::vector<const GeoSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);
    TrainConfig tc;
    tc.lr = 0.001;
    Sgd opt(tc.lr, tc.momentum);
    double previous = train_step(model, opt, batch, tc).total;
    bool strictly = true;
    for (std::size_t i = 0; i < steps; ++i) {
      const double loss = train_step(model, opt, batch, tc).total;
      strictly = strictly && loss < previous;
      previous = loss;
    }
    decreasing += strictly;
  }
  return {"", decreasing >= 8, std::to_string(decreasing) + "/10 seeds strictly decreasing", 0};
}

CheckResult check_overfit(const OverfitOptions& options) {
  const auto start = Clock::now();
  const ModelConfig cfg;
  const auto samples = generate_dataset(synth_for(cfg), options.seed, options.pairs);
  Model<float> model(cfg);
  TrainConfig tc;
  tc.lr = 0.01;
  tc.epochs = std::numeric_limits<std::size_t>::max();
  tc.max_steps = options.max_steps;
  tc.threads = options.threads;
  double acc = 0;
  std::size_t reached_at = 0;
  TrainOutputs outputs;
  outputs.on_epoch = [&](std::size_t, std::size_t steps) {
    acc = evaluate(model, samples, options.threads).acc_at_50;
    if (acc >= options.target_acc_at_50) reached_at = steps;
    return reached_at != 0;
  };
  const auto result = train(model, samples, tc, outputs);
  const double elapsed = seconds_since(start);
  const bool ok = reached_at != 0 && elapsed <= options.time_limit_seconds;
  std::string detail = "acc@0.5 = " + fixed(acc) + " after " + std::to_string(result.steps.size()) + " steps, " +
                       fixed(elapsed, 1) + " s";
  return {"", ok, detail, 0};
}

CheckResult check_generalization(const GeneralizationOptions& options) {
  const auto start = Clock::now();
  const ModelConfig base;
  const SynthConfig sc = synth_for(base);
  const auto train_set = generate_dataset(sc, options.seed, options.train_pairs);
  const auto eval_set = generate_dataset(sc, options.seed, options.eval_pairs, options.train_pairs);
  TrainConfig tc;
  tc.epochs = options.epochs;
  tc.threads = options.threads;
  tc.shuffle_seed = options.seed;

  auto run = [&](bool use_cvoam) {
    ModelConfig cfg = base;
    cfg.use_cvoam = use_cvoam;
    cfg.seed = options.seed;
    Model<float> model(cfg);
    TrainOutputs outputs;
    if (options.progress) {
      outputs.on_epoch = [&](std::size_t epoch, std::size_t steps) {
        options.progress(std::string(use_cvoam ? "full" : "no-cvoam") + " epoch " + std::to_string(epoch) + "/" +
                         std::to_string(tc.epochs) + ", step " + std::to_string(steps) + ", " +
                         fixed(seconds_since(start), 0) + " s");
        return false;
      };
    }
    train(model, train_set, tc, outputs);
    return evaluate(model, eval_set, options.threads);
  };
  const auto full = run(true);
  const auto ablation = run(false);
  const double elapsed = seconds_since(start);
  const bool ok = full.acc_at_25 >= options.min_acc_at_25 && full.acc_at_25 > ablation.acc_at_25 &&
                  elapsed <= options.time_limit_seconds;
  const std::string detail = "acc@0.25 " + fixed(full.acc_at_25) + " (acc@0.5 " + fixed(full.acc_at_50) +
                             ") vs no-CVOAM " + fixed(ablation.acc_at_25) + " (acc@0.5 " + fixed(ablation.acc_at_50) +
                             "), " + fixed(elapsed, 0) + " s";
  return {"", ok, detail, 0};
}

}  // namespace afgeo::verify
