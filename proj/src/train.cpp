#include "afgeo/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "afgeo/ops.hpp"

namespace afgeo {

void Sgd::step(std::span<Parameter<float>> params) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor.numel(), 0.0f);
  }
  for (const auto& p : params) {
    for (float g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  const auto lr = static_cast<float>(lr_), m = static_cast<float>(momentum_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto values = t.mutable_values();
    auto grad = t.grad();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      v[k] = m * v[k] + grad[k];
      values[k] -= lr * v[k];
    }
    t.zero_grad();
  }
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("train config: lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train config: momentum must be in [0, 1)");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) {
    throw std::invalid_argument("train config: lr_decay_factor must be in (0, 1]");
  }
  if (threads == 0) throw std::invalid_argument("train config: threads must be positive");
}

double TrainConfig::lr_at_epoch(std::size_t epoch) const {
  if (lr_decay_epochs == 0) return lr;
  return lr * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_epochs));
}

std::string format_step_log(const StepLog& log) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%zu", log.step, log.total, log.cls, log.cn, log.reg,
                log.n_pos);
  return buf;
}

std::vector<AssignmentTargets> sample_targets(const ModelConfig& cfg, const GeoSample& sample) {
  std::vector<AssignmentTargets> targets;
  const Box box = sample.gt_box;
  for (const auto& level : cfg.head.levels) {
    const auto s = static_cast<std::size_t>(level.stride);
    targets.push_back(assign_targets({cfg.reference_h / s, cfg.reference_w / s}, level, std::span<const Box>(&box, 1),
                                     cfg.head.radius_rho));
  }
  return targets;
}

namespace {

// Runs fn(worker, item) over items split round-robin across workers.
// Worker exceptions are rethrown on the calling thread (lowest worker first).
template <typename Fn>
void parallel_items(std::size_t items, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, items));
  if (workers == 1) {
    for (std::size_t i = 0; i < items; ++i) fn(std::size_t{0}, i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < items; i += workers) fn(w, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

StepLog train_step(Model<float>& model, Sgd& opt, std::span<const GeoSample* const> batch, const TrainConfig& cfg) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("train_step: empty batch");
  auto& params = model.parameters();
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, n));

  // Each worker differentiates into its own gradient buffers over shared weights.
  std::vector<std::vector<Parameter<float>>> views(workers);
  for (auto& view : views) {
    for (const auto& p : params) view.push_back({p.name, workers == 1 ? p.tensor : p.tensor.alias()});
  }

  std::vector<LossBreakdown<float>> losses(n);
  const auto inv_n = static_cast<float>(1.0 / static_cast<double>(n));
  parallel_items(n, workers, [&](std::size_t w, std::size_t i) {
    const auto outputs = model.forward(*batch[i], views[w]);
    const auto targets = sample_targets(model.config(), *batch[i]);
    losses[i] = total_loss<float>(outputs, targets, cfg.loss);
    if (std::isfinite(losses[i].total.item())) scale(losses[i].total, inv_n).backward();
  });

  StepLog log;
  for (const auto& l : losses) {
    log.total += l.total.item();
    log.cls += l.cls_term;
    log.cn += l.cn_term;
    log.reg += l.reg_term;
    log.n_pos += l.n_pos;
  }
  const double dn = static_cast<double>(n);
  log.total /= dn;
  log.cls /= dn;
  log.cn /= dn;
  log.reg /= dn;
  if (!std::isfinite(log.total)) {
    for (auto& p : params) p.tensor.zero_grad();
    throw TrainingError("non-finite loss");
  }

  if (workers > 1) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto g = params[k].tensor.mutable_grad();
      for (const auto& view : views) {
        auto src = view[k].tensor.grad();
        for (std::size_t e = 0; e < g.size(); ++e) g[e] += src[e];
      }
    }
  }
  try {
    opt.step(params);
  } catch (...) {
    for (auto& p : params) p.tensor.zero_grad();
    throw;
  }
  return log;
}

TrainResult train(Model<float>& model, const std::vector<GeoSample>& samples, const TrainConfig& cfg,
                  const TrainOutputs& outputs) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("train: no samples");
  if (outputs.checkpoint_dir) std::filesystem::create_directories(*outputs.checkpoint_dir);

  Sgd opt(cfg.lr, cfg.momentum);
  TrainResult result;
  std::vector<std::size_t> order(samples.size());
  std::size_t step = 0;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    opt.set_lr(cfg.lr_at_epoch(epoch));
    // Fisher-Yates on raw engine output keeps the order library-independent.
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg.shuffle_seed * 1000003u + epoch);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);

    for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      std::vector<const GeoSample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(&samples[order[i]]);
      }
      StepLog log;
      try {
        log = train_step(model, opt, batch, cfg);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step) + " (epoch " +
                            std::to_string(epoch + 1) + "); training aborted");
      }
      log.step = step++;
      for (auto* os : outputs.logs) *os << format_step_log(log) << '\n';
      result.steps.push_back(log);
      if (cfg.max_steps && step >= cfg.max_steps) stop = true;
    }
    for (auto* os : outputs.logs) os->flush();
    result.epochs_completed = epoch + 1;
    if (outputs.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.afgeo", epoch + 1);
      save_model(*outputs.checkpoint_dir / name, model);
      save_model(*outputs.checkpoint_dir / "latest.afgeo", model);
    }
    if (outputs.on_epoch && outputs.on_epoch(epoch + 1, step)) stop = true;
  }
  return result;
}

EvalReport report_from_ious(std::span<const double> ious) {
  if (ious.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport r;
  r.count = ious.size();
  std::size_t hit025 = 0, hit05 = 0;
  double total = 0;
  for (double v : ious) {
    hit025 += v >= 0.25;
    hit05 += v >= 0.5;
    total += v;
  }
  const double n = static_cast<double>(ious.size());
  r.acc_at_25 = 100.0 * static_cast<double>(hit025) / n;
  r.acc_at_50 = 100.0 * static_cast<double>(hit05) / n;
  r.mean_iou = total / n;
  return r;
}

Prediction predict(const Model<float>& model, const GeoSample& sample) {
  NoGradGuard guard;
  const auto outputs = model.forward(sample);
  Prediction p;
  p.sample_id = sample.sample_id;
  p.decoded = decode<float>(outputs);
  p.iou = iou(p.decoded.box, sample.gt_box);
  return p;
}

EvalReport evaluate(const Model<float>& model, const std::vector<GeoSample>& samples, std::size_t threads) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<Prediction> predictions(samples.size());
  parallel_items(samples.size(), threads,
                 [&](std::size_t, std::size_t i) { predictions[i] = predict(model, samples[i]); });
  std::vector<double> ious;
  for (const auto& p : predictions) ious.push_back(p.iou);
  EvalReport r = report_from_ious(ious);
  r.predictions = std::move(predictions);
  return r;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : report.predictions) {
    const auto& b = p.decoded.box;
    preds.push_back({{"sample_id", p.sample_id},
                     {"box", {b.x_min, b.y_min, b.x_max, b.y_max}},
                     {"confidence", p.decoded.confidence},
                     {"iou", p.iou}});
  }
  return {{"count", report.count},
          {"acc_at_25", report.acc_at_25},
          {"acc_at_50", report.acc_at_50},
          {"mean_iou", report.mean_iou},
          {"predictions", preds}};
}

std::string format_prediction_csv(const std::string& sample_id, const DecodedBox& decoded) {
  char buf[200];
  const auto& b = decoded.box;
  std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%.2f,%.2f,%.2f", b.x_min, b.y_min, b.x_max, b.y_max, decoded.confidence);
  return sample_id + buf;
}

std::size_t threads_from_env() {
  const char* v = std::getenv("AFGEO_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw std::invalid_argument(std::string("AFGEO_THREADS must be a positive integer, got '") + v + "'");
  }
  return static_cast<std::size_t>(n);
}

}  // namespace afgeo
