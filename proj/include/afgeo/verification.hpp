#pragma once

// Self-contained correctness and quality checks shared by `afgeo selftest`
// and the acceptance runner.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "afgeo/model.hpp"

namespace afgeo::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

/// Runs `body`, timing it; an exception becomes a failed result carrying its message.
CheckResult run_check(const std::string& name, const std::function<CheckResult()>& body);

/// Model config used by the gradient check: 3x32x32 query, 3x64x64 reference, channels [4,8].
ModelConfig tiny_model_config();

/// Five-point finite differences in double precision, h = 1e-3, every
/// parameter element, relative error < 1e-4.
CheckResult check_gradients();

/// Vectorised assignment vs the brute-force oracle on `configs` random configurations.
CheckResult check_assignment_oracle(std::size_t configs = 500);

/// Assign then decode `boxes` random ground-truth boxes; every positive location
/// must reproduce its box within 1e-6.
CheckResult check_decode_round_trip(std::size_t boxes = 1000);

/// GIoU, centerness, focal loss and GPE spot values within 1e-6.
CheckResult check_spot_values();

/// Problems with a parameter census: gpe.sigma must hold exactly one element
/// and no parameter may live under "cvoam.". Empty when the census is valid.
std::vector<std::string> census_violations(const std::map<std::string, std::size_t>& census);
CheckResult check_census(const std::map<std::string, std::size_t>& census);
/// Census of a freshly built model with `cfg`.
CheckResult check_census(const ModelConfig& cfg = {});

/// IoUs {0.6, 0.4, 0.5} must give acc@0.5 = 66.67 +- 0.01 and acc@0.25 = 100.
CheckResult check_accuracy_metric();

/// Two identical training runs must give bit-identical losses at steps 0 and 10.
CheckResult check_determinism();

/// Loss on a fixed batch must strictly decrease over `steps` steps at lr 0.001
/// for at least 8 of 10 seeds.
CheckResult check_loss_decrease(std::size_t steps = 10);

struct OverfitOptions {
  std::size_t pairs = 32;
  std::size_t max_steps = 2000;
  double target_acc_at_50 = 95.0;
  double time_limit_seconds = 600;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Trains the default model on `pairs` samples until acc@0.5 on those samples
/// reaches the target, within `max_steps` steps at lr 0.01.
CheckResult check_overfit(const OverfitOptions& options = {});

struct GeneralizationOptions {
  std::size_t train_pairs = 2000;
  std::size_t eval_pairs = 200;
  std::size_t epochs = 40;
  double min_acc_at_25 = 70.0;
  double time_limit_seconds = 7200;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Per-epoch progress lines; may be empty.
  std::function<void(const std::string&)> progress;
};

/// Trains the full model and the no-CVOAM ablation on the same data and
/// evaluates both on held-out pairs. Passes when the full model reaches
/// `min_acc_at_25` and beats the ablation strictly.
CheckResult check_generalization(const GeneralizationOptions& options = {});

}  // namespace afgeo::verify
