#pragma once

// Optimisation, training loop and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afgeo/head.hpp"
#include "afgeo/losses.hpp"
#include "afgeo/model.hpp"

namespace afgeo {

/// SGD with heavy-ball momentum: v <- m v + g; p <- p - lr v; grads are then zeroed.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  /// Throws TrainingError naming the first parameter with a non-finite gradient;
  /// no parameter is modified in that case.
  void step(std::span<Parameter<float>> params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, momentum_;
  std::vector<std::vector<float>> velocity_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  /// Step decay: lr is multiplied by lr_decay_factor every lr_decay_epochs epochs (0 disables).
  std::size_t lr_decay_epochs = 0;
  double lr_decay_factor = 0.1;
  /// Stops after this many optimizer steps (0 = no limit).
  std::size_t max_steps = 0;
  std::uint64_t shuffle_seed = 0;
  std::size_t threads = 1;
  LossWeights loss;

  void validate() const;
  double lr_at_epoch(std::size_t epoch) const;
};

/// Batch means of the loss terms and the batch total of positives.
struct StepLog {
  std::size_t step = 0;
  double total = 0, cls = 0, cn = 0, reg = 0;
  std::size_t n_pos = 0;
};

/// Tab-separated: step, total, cls, cn, reg, n_pos.
std::string format_step_log(const StepLog& log);

struct TrainOutputs {
  /// Receives checkpoints/epoch_NNN.afgeo and checkpoints/latest.afgeo when set.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Step log sinks (e.g. stdout and a log file).
  std::vector<std::ostream*> logs;
  /// Called after each epoch with the 1-based epoch number; returning true stops training.
  std::function<bool(std::size_t epoch, std::size_t steps)> on_epoch;
};

struct TrainResult {
  std::vector<StepLog> steps;
  std::size_t epochs_completed = 0;
};

/// One optimizer step on `batch`; returns the step log (without the step index).
StepLog train_step(Model<float>& model, Sgd& opt, std::span<const GeoSample* const> batch, const TrainConfig& cfg);

/// Throws TrainingError on a non-finite loss or gradient, leaving the last
/// written checkpoint intact.
TrainResult train(Model<float>& model, const std::vector<GeoSample>& samples, const TrainConfig& cfg,
                  const TrainOutputs& outputs = {});

/// Targets for a sample on every head level of the model.
std::vector<AssignmentTargets> sample_targets(const ModelConfig& cfg, const GeoSample& sample);

struct Prediction {
  std::string sample_id;
  DecodedBox decoded;
  double iou = 0;
};

struct EvalReport {
  std::size_t count = 0;
  double acc_at_25 = 0;  // percent of samples with IoU >= 0.25
  double acc_at_50 = 0;  // percent of samples with IoU >= 0.5
  double mean_iou = 0;
  std::vector<Prediction> predictions;
};

EvalReport report_from_ious(std::span<const double> ious);
Prediction predict(const Model<float>& model, const GeoSample& sample);
EvalReport evaluate(const Model<float>& model, const std::vector<GeoSample>& samples, std::size_t threads = 1);
nlohmann::json to_json(const EvalReport& report);

/// "id,x_min,y_min,x_max,y_max,confidence" with two decimals.
std::string format_prediction_csv(const std::string& sample_id, const DecodedBox& decoded);

/// AFGEO_THREADS, defaulting to 1; rejects anything but a positive integer.
std::size_t threads_from_env();

}  // namespace afgeo
