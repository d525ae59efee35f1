#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "afgeo/box.hpp"
#include "afgeo/gpe.hpp"

namespace afgeo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Every CliConfig member.
#define AFGEO_CLI_FIELDS(X) \
  X(seed) X(data) X(train_samples) X(val_samples) X(query_size) X(reference_size) X(min_shapes) X(max_shapes) \
  X(min_object) X(max_object) X(min_window_scale) X(max_window_scale) X(max_center_jitter) X(click_noise) \
  X(flip_probability) X(backbone_channels) X(backbone_strides) X(head_convs) X(head_levels) X(radius_rho) \
  X(gpe_sigma_init) X(gpe_sigma_floor) X(use_gpe) X(use_cvoam) X(epochs) X(batch_size) X(lr) X(momentum) \
  X(lr_decay_epochs) X(lr_decay_factor) X(max_steps) X(focal_alpha) X(focal_gamma) X(lambda_cls) X(lambda_cn) \
  X(lambda_reg)

SynthConfig CliConfig::synth() const {
  SynthConfig s;
  s.query_size = query_size;
  s.reference_size = reference_size;
  s.min_shapes = min_shapes;
  s.max_shapes = max_shapes;
  s.min_object = min_object;
  s.max_object = max_object;
  s.min_window_scale = min_window_scale;
  s.max_window_scale = max_window_scale;
  s.max_center_jitter = max_center_jitter;
  s.click_noise = click_noise;
  s.flip_probability = flip_probability;
  return s;
}

ModelConfig CliConfig::model() const {
  ModelConfig m;
  m.backbone_channels = backbone_channels;
  m.backbone_strides = backbone_strides;
  m.head_convs = head_convs;
  if (head_levels == "single") {
    m.head = HeadConfig::single_level(static_cast<double>(m.total_stride()));
  } else if (head_levels == "three") {
    m.head = HeadConfig::three_level();
  } else {
    throw std::invalid_argument("config: head_levels must be \"single\" or \"three\", got \"" + head_levels + "\"");
  }
  m.head.radius_rho = radius_rho;
  m.gpe.sigma_init = gpe_sigma_init;
  m.gpe.sigma_floor = gpe_sigma_floor;
  m.query_h = m.query_w = query_size;
  m.reference_h = m.reference_w = reference_size;
  m.seed = seed;
  m.use_gpe = use_gpe;
  m.use_cvoam = use_cvoam;
  return m;
}

TrainConfig CliConfig::train(std::size_t threads) const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr = lr;
  t.momentum = momentum;
  t.lr_decay_epochs = lr_decay_epochs;
  t.lr_decay_factor = lr_decay_factor;
  t.max_steps = max_steps;
  t.shuffle_seed = seed;
  t.threads = threads;
  t.loss.focal_alpha = focal_alpha;
  t.loss.focal_gamma = focal_gamma;
  t.loss.lambda_cls = lambda_cls;
  t.loss.lambda_cn = lambda_cn;
  t.loss.lambda_reg = lambda_reg;
  return t;
}

void CliConfig::validate() const {
  synth().validate();
  model().validate();
  train(1).validate();
}

json to_json(const CliConfig& cfg) {
  json j;
#define AFGEO_CLI_TO_JSON(f) j[#f] = cfg.f;
  AFGEO_CLI_FIELDS(AFGEO_CLI_TO_JSON)
#undef AFGEO_CLI_TO_JSON
  return j;
}

namespace {

/// Values must have the JSON type of the default: booleans, strings,
/// non-negative integers, any number for reals, arrays of non-negative integers.
bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

bool same_kind(const json& want, const json& got) {
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_number_unsigned()) return is_count(got);
  if (want.is_number()) return got.is_number();
  if (want.is_array()) return got.is_array() && std::all_of(got.begin(), got.end(), is_count);
  return false;
}

std::string kind_name(const json& want) {
  if (want.is_boolean()) return "a boolean";
  if (want.is_string()) return "a string";
  if (want.is_number_unsigned()) return "a non-negative integer";
  if (want.is_number()) return "a number";
  return "an array of non-negative integers";
}

}  // namespace

CliConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  const json defaults = to_json(CliConfig{});
  for (const auto& [key, value] : j.items()) {
    const auto it = defaults.find(key);
    if (it == defaults.end()) throw std::invalid_argument("config: unknown key \"" + key + "\"");
    if (!same_kind(*it, value)) throw std::invalid_argument("config: \"" + key + "\" must be " + kind_name(*it));
  }
  CliConfig cfg;
#define AFGEO_CLI_FROM_JSON(f) \
  if (j.contains(#f)) j.at(#f).get_to(cfg.f);
  AFGEO_CLI_FIELDS(AFGEO_CLI_FROM_JSON)
#undef AFGEO_CLI_FROM_JSON
  return cfg;
}

CliConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    CliConfig cfg = config_from_json(j);
    if (!cfg.data.empty() && fs::path(cfg.data).is_relative()) {
      cfg.data = (path.parent_path() / cfg.data).lexically_normal().string();
    }
    return cfg;
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::vector<std::pair<std::string, DecodedBox>> read_prediction_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open predictions " + path.string());
  std::vector<std::pair<std::string, DecodedBox>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 6) throw std::runtime_error(where + "expected 6 comma-separated fields");
    double v[5];
    for (std::size_t i = 0; i < 5; ++i) {
      std::size_t used = 0;
      try {
        v[i] = std::stod(fields[i + 1], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != fields[i + 1].size()) {
        throw std::runtime_error(where + "field " + std::to_string(i + 2) + " is not a number");
      }
    }
    DecodedBox d;
    d.box = {v[0], v[1], v[2], v[3]};
    d.confidence = v[4];
    rows.emplace_back(fields[0], d);
  }
  return rows;
}

std::string format_eval_table(const std::string& label, const EvalReport& report) {
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf, "%-12s %8s %12s %11s %9s\n", "Split", "Samples", "acc@0.25(%)", "acc@0.5(%)",
                "mean IoU");
  s += buf;
  std::snprintf(buf, sizeof buf, "%-12s %8zu %12.2f %11.2f %9.4f\n", label.c_str(), report.count, report.acc_at_25,
                report.acc_at_50, report.mean_iou);
  s += buf;
  return s;
}

std::vector<SelftestCheck> default_selftest_checks() {
  return {
      {"gradient check", [] { return verify::check_gradients(); }},
      {"assignment oracle", [] { return verify::check_assignment_oracle(); }},
      {"decode round trip", [] { return verify::check_decode_round_trip(); }},
      {"spot values", [] { return verify::check_spot_values(); }},
      {"parameter census", [] { return verify::check_census(ModelConfig{}); }},
      {"accuracy metric", [] { return verify::check_accuracy_metric(); }},
      {"determinism", [] { return verify::check_determinism(); }},
      {"loss decrease", [] { return verify::check_loss_decrease(); }},
  };
}

int run_selftest(const std::vector<SelftestCheck>& checks, std::ostream& out, std::ostream& err) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-20s %-6s %8s  %s\n", "check", "result", "seconds", "detail");
  out << buf << std::flush;
  std::vector<std::string> failed;
  for (const auto& check : checks) {
    const auto r = verify::run_check(check.name, check.run);
    std::snprintf(buf, sizeof buf, "%-20s %-6s %8.2f  ", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds);
    out << buf << r.detail << '\n' << std::flush;
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "all " << checks.size() << " checks passed\n";
    return 0;
  }
  err << "selftest failed: ";
  for (std::size_t i = 0; i < failed.size(); ++i) err << (i ? ", " : "") << failed[i];
  err << '\n';
  return 1;
}

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string sample_id;
  std::string predictions;
};

CliConfig effective_config(const Flags& flags) {
  CliConfig cfg = flags.config.empty() ? CliConfig{} : load_config(flags.config);
  if (flags.seed) cfg.seed = *flags.seed;
  cfg.validate();
  return cfg;
}

void write_text_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

void echo_config(const fs::path& dir, const CliConfig& cfg) {
  write_text_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
}

std::vector<GeoSample> rows_of_file(const CliConfig& cfg, std::size_t first, std::size_t count) {
  const auto all = load_dataset(cfg.data);
  if (all.size() < first + count) {
    throw std::runtime_error(cfg.data + " has " + std::to_string(all.size()) + " samples; the configured split needs " +
                             std::to_string(first + count));
  }
  return {all.begin() + static_cast<std::ptrdiff_t>(first), all.begin() + static_cast<std::ptrdiff_t>(first + count)};
}

std::vector<GeoSample> training_split(const CliConfig& cfg) {
  if (!cfg.data.empty()) return rows_of_file(cfg, 0, cfg.train_samples);
  return generate_dataset(cfg.synth(), cfg.seed, cfg.train_samples, 0);
}

/// Validation split: the `val_samples` samples following the training split.
std::vector<GeoSample> validation_split(const CliConfig& cfg) {
  if (!cfg.data.empty()) return rows_of_file(cfg, cfg.train_samples, cfg.val_samples);
  return generate_dataset(cfg.synth(), cfg.seed, cfg.val_samples, cfg.train_samples);
}

const GeoSample& find_sample(const std::vector<GeoSample>& samples, const std::string& id) {
  for (const auto& s : samples) {
    if (s.sample_id == id) return s;
  }
  throw std::runtime_error("sample '" + id + "' is not in the validation split");
}

/// Loads the checkpoint, checking it against the config's model when a config was given.
Model<float> load_checked(const Flags& flags, const CliConfig& cfg) {
  if (!flags.config.empty()) return load_model<float>(flags.checkpoint, cfg.model());
  Model<float> model = load_model<float>(flags.checkpoint);
  const auto& m = model.config();
  if (m.query_h != cfg.query_size || m.reference_h != cfg.reference_size) {
    throw std::runtime_error("checkpoint expects " + std::to_string(m.query_h) + "px queries and " +
                             std::to_string(m.reference_h) + "px references; pass the run's config.json with --config");
  }
  return model;
}

int cmd_gen_data(const Flags& flags, std::ostream& out) {
  const CliConfig cfg = effective_config(flags);
  const std::size_t count = cfg.train_samples + cfg.val_samples;
  save_dataset(flags.out, generate_dataset(cfg.synth(), cfg.seed, count, 0));
  echo_config(flags.out, cfg);
  out << "wrote " << count << " samples to " << (fs::path(flags.out) / "annotations.jsonl").string() << '\n';
  return 0;
}

int cmd_train(const Flags& flags, std::ostream& out, std::ostream& err) {
  const CliConfig cfg = effective_config(flags);
  const std::size_t threads = threads_from_env();
  const fs::path run_dir = flags.out;
  for (const char* sub : {"checkpoints", "logs", "reports"}) fs::create_directories(run_dir / sub);
  echo_config(run_dir, cfg);

  const auto train_set = training_split(cfg);
  if (train_set.empty()) throw std::runtime_error("train_samples must be positive");
  const auto val_set = validation_split(cfg);

  std::ofstream log(run_dir / "logs" / "train.log", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (run_dir / "logs" / "train.log").string());
  const char* header = "step\ttotal\tcls\tcn\treg\tn_pos\n";
  out << header;
  log << header;

  Model<float> model(cfg.model());
  const TrainConfig tc = cfg.train(threads);
  TrainOutputs outputs;
  outputs.checkpoint_dir = run_dir / "checkpoints";
  outputs.logs = {&out, &log};
  outputs.on_epoch = [&](std::size_t epoch, std::size_t steps) {
    err << "epoch " << epoch << "/" << tc.epochs << " done, " << steps << " steps\n";
    return false;
  };
  try {
    train(model, train_set, tc, outputs);
  } catch (const TrainingError& e) {
    err << "training aborted: " << e.what() << "\nlast good checkpoint: "
        << (run_dir / "checkpoints" / "latest.afgeo").string() << '\n';
    return 1;
  }

  if (val_set.empty()) {
    err << "val_samples is 0; no validation report written\n";
    return 0;
  }
  const auto report = evaluate(model, val_set, threads);
  write_text_file(run_dir / "reports" / "validation.json", to_json(report).dump(2) + "\n");
  out << format_eval_table("validation", report);
  return 0;
}

int cmd_eval(const Flags& flags, std::ostream& out) {
  const CliConfig cfg = effective_config(flags);
  EvalReport report;
  if (!flags.predictions.empty()) {
    const auto samples = validation_split(cfg);
    if (samples.empty()) throw std::runtime_error("evaluation split is empty");
    std::map<std::string, DecodedBox> by_id;
    for (const auto& [id, d] : read_prediction_csv(flags.predictions)) {
      if (!by_id.emplace(id, d).second) throw std::runtime_error("duplicate prediction for sample '" + id + "'");
    }
    std::vector<double> ious;
    std::vector<Prediction> preds;
    for (const auto& s : samples) {
      const auto it = by_id.find(s.sample_id);
      if (it == by_id.end()) throw std::runtime_error("no prediction for sample '" + s.sample_id + "'");
      preds.push_back({s.sample_id, it->second, iou(it->second.box, s.gt_box)});
      ious.push_back(preds.back().iou);
      by_id.erase(it);
    }
    if (!by_id.empty()) throw std::runtime_error("prediction for unknown sample '" + by_id.begin()->first + "'");
    report = report_from_ious(ious);
    report.predictions = std::move(preds);
  } else {
    if (flags.checkpoint.empty()) throw std::runtime_error("eval needs --checkpoint or --predictions");
    const Model<float> model = load_checked(flags, cfg);
    report = evaluate(model, validation_split(cfg), threads_from_env());
  }
  if (!flags.out.empty()) {
    write_text_file(fs::path(flags.out) / "reports" / "eval.json", to_json(report).dump(2) + "\n");
  }
  out << format_eval_table("validation", report);
  return 0;
}

int cmd_infer(const Flags& flags, std::ostream& out) {
  const CliConfig cfg = effective_config(flags);
  const Model<float> model = load_checked(flags, cfg);
  const auto samples = validation_split(cfg);
  std::string csv;
  if (!flags.sample_id.empty()) {
    const auto p = predict(model, find_sample(samples, flags.sample_id));
    csv = format_prediction_csv(p.sample_id, p.decoded) + "\n";
  } else {
    for (const auto& p : evaluate(model, samples, threads_from_env()).predictions) {
      csv += format_prediction_csv(p.sample_id, p.decoded) + "\n";
    }
  }
  if (!flags.out.empty()) write_text_file(fs::path(flags.out) / "reports" / "predictions.csv", csv);
  out << csv;
  return 0;
}

int cmd_export_heatmap(const Flags& flags, std::ostream& out) {
  const CliConfig cfg = effective_config(flags);
  const Model<float> model = load_checked(flags, cfg);
  if (!model.config().use_gpe) throw std::runtime_error("the checkpoint was trained without GPE; no GPE map to export");
  if (!model.config().use_cvoam) throw std::runtime_error("the checkpoint was trained without CVOAM; no a1 map to export");
  const auto samples = validation_split(cfg);
  const GeoSample& sample = find_sample(samples, flags.sample_id);
  ForwardTrace<float> trace;
  {
    NoGradGuard no_grad;
    model.forward(sample, &trace);
  }
  auto write = [&](const Tensor<float>& map, const std::string& suffix, HeatmapScale scale) {
    const auto& shape = map.shape();
    const std::size_t h = shape[shape.size() - 2], w = shape[shape.size() - 1];
    const auto v = map.values();
    const fs::path path = fs::path(flags.out) / (sample.sample_id + suffix);
    fs::create_directories(flags.out);
    write_heatmap_pgm(path, h, w, std::vector<double>(v.begin(), v.end()), scale);
    out << "wrote " << path.string() << " (" << w << "x" << h << ")\n";
  };
  write(trace.gpe_map, "_gpe.pgm", HeatmapScale::kUnit);
  write(trace.a1, "_a1.pgm", HeatmapScale::kMinMax);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"afgeo: click-guided cross-view object localization"};
  app.name("afgeo");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Flags flags;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config, "flat JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", flags.seed, "overrides the config seed");
  };
  auto* gen = app.add_subcommand("gen-data", "write synthetic images and annotations.jsonl");
  add_config(gen);
  gen->add_option("--out", flags.out, "dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model into a run directory");
  add_config(train_cmd);
  train_cmd->add_option("--out", flags.out, "run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "report acc@0.25 / acc@0.5 on the validation split");
  add_config(eval_cmd);
  eval_cmd->add_option("--checkpoint", flags.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--predictions", flags.predictions, "score a predictions CSV instead of a model")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", flags.out, "run directory for reports/eval.json");

  auto* infer_cmd = app.add_subcommand("infer", "print one CSV prediction line per validation sample");
  add_config(infer_cmd);
  infer_cmd->add_option("--checkpoint", flags.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--sample-id", flags.sample_id, "only this sample");
  infer_cmd->add_option("--out", flags.out, "run directory for reports/predictions.csv");

  auto* heat = app.add_subcommand("export-heatmap", "write the GPE and a1 maps of a sample as PGM images");
  add_config(heat);
  heat->add_option("--checkpoint", flags.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  heat->add_option("--sample-id", flags.sample_id, "sample to render")->required();
  heat->add_option("--out", flags.out, "output directory")->required();

  auto* self = app.add_subcommand("selftest", "run the built-in correctness checks");

  std::vector<std::string> argv_store{"afgeo"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (gen->parsed()) return cmd_gen_data(flags, out);
    if (train_cmd->parsed()) return cmd_train(flags, out, err);
    if (eval_cmd->parsed()) return cmd_eval(flags, out);
    if (infer_cmd->parsed()) return cmd_infer(flags, out);
    if (heat->parsed()) return cmd_export_heatmap(flags, out);
    if (self->parsed()) return run_selftest(default_selftest_checks(), out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace afgeo::cli
