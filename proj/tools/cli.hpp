#pragma once

// Command-line front end: flat JSON configuration and the afgeo commands.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afgeo/data.hpp"
#include "afgeo/model.hpp"
#include "afgeo/train.hpp"
#include "afgeo/verification.hpp"

namespace afgeo::cli {

/// Every tunable of the pipeline as one flat key-value record. Missing keys
/// keep their defaults; unknown keys and mistyped values are rejected.
struct CliConfig {
  std::uint64_t seed = 0;

  // Data. An empty `data` selects the synthetic generator.
  std::string data;
  std::size_t train_samples = 2000;
  std::size_t val_samples = 200;
  std::size_t query_size = 64;
  std::size_t reference_size = 128;
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  double min_object = 16;
  double max_object = 40;
  double min_window_scale = 1.6;
  double max_window_scale = 2.4;
  double max_center_jitter = 0.15;
  double click_noise = 0.1;
  double flip_probability = 0.5;

  // Model.
  std::vector<std::size_t> backbone_channels{16, 32, 64};
  std::vector<std::size_t> backbone_strides{2, 2, 2};
  std::size_t head_convs = 1;
  /// "single" (one level at the backbone stride) or "three" (strides 8/16/32).
  std::string head_levels = "single";
  double radius_rho = 1.5;
  /// <= 0 selects max(H,W)/8 of the query feature grid.
  double gpe_sigma_init = 0;
  double gpe_sigma_floor = 0.5;
  bool use_gpe = true;
  bool use_cvoam = true;

  // Training.
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t lr_decay_epochs = 0;
  double lr_decay_factor = 0.1;
  std::size_t max_steps = 0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double lambda_cls = 1.0;
  double lambda_cn = 1.0;
  double lambda_reg = 1.0;

  SynthConfig synth() const;
  ModelConfig model() const;
  /// `threads` comes from the environment, not the file.
  TrainConfig train(std::size_t threads) const;
  /// Throws std::invalid_argument describing the first invalid setting.
  void validate() const;
};

nlohmann::json to_json(const CliConfig& cfg);
/// Applies the keys of `j` over the defaults; throws naming unknown or mistyped keys.
CliConfig config_from_json(const nlohmann::json& j);
/// Reads a config file; a relative `data` path is taken relative to the file's directory.
CliConfig load_config(const std::filesystem::path& path);

/// Reads "id,x_min,y_min,x_max,y_max,confidence" lines as produced by `infer`.
std::vector<std::pair<std::string, DecodedBox>> read_prediction_csv(const std::filesystem::path& path);

/// Paper-style results table (acc@0.25 / acc@0.5 in percent).
std::string format_eval_table(const std::string& label, const EvalReport& report);

struct SelftestCheck {
  std::string name;
  std::function<verify::CheckResult()> run;
};

/// Gradient check, assignment oracle, decode round trip, spot values,
/// parameter census, metric enumeration, determinism and loss decrease.
std::vector<SelftestCheck> default_selftest_checks();

/// Prints the pass/fail table to `out`; returns 0 when every check passes,
/// otherwise 1 after naming the failed checks on `err`.
int run_selftest(const std::vector<SelftestCheck>& checks, std::ostream& out, std::ostream& err);

/// Entry point: args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace afgeo::cli
