#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "afgeo/data.hpp"
#include "cli.hpp"
#include "doctest.h"

using namespace afgeo;
using namespace afgeo::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("afgeo_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

/// A tiny model and data set so commands finish in well under a second.
fs::path tiny_config(const fs::path& dir, const std::string& extra = "") {
  const fs::path p = dir / "config.in.json";
  write_text(p, R"({"query_size": 32, "reference_size": 64, "min_object": 8, "max_object": 20,
                    "backbone_channels": [4, 8], "backbone_strides": [2, 2],
                    "train_samples": 8, "val_samples": 3, "epochs": 2, "batch_size": 4)" +
                    extra + "}");
  return p;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_bytes(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("config defaults round-trip and partial files keep defaults") {
  const CliConfig d;
  CHECK(to_json(config_from_json(to_json(d))) == to_json(d));
  const auto c = config_from_json(json{{"epochs", 3}, {"lr", 0.5}, {"use_cvoam", false}});
  CHECK(c.epochs == 3);
  CHECK(c.lr == 0.5);
  CHECK(!c.use_cvoam);
  CHECK(c.batch_size == 8);
  CHECK(c.model().use_gpe);
  CHECK(c.model().head.levels.size() == 1);
  CHECK(c.model().head.levels[0].stride == 8);
  CHECK(config_from_json(json{{"lr", 1}}).lr == 1.0);
}

TEST_CASE("config rejects unknown keys and mistyped values") {
  CHECK_THROWS_WITH(config_from_json(json{{"learning_rate", 0.1}}), doctest::Contains("unknown key \"learning_rate\""));
  CHECK_THROWS_WITH(config_from_json(json{{"epochs", -1}}), doctest::Contains("\"epochs\""));
  CHECK_THROWS_WITH(config_from_json(json{{"epochs", 1.5}}), doctest::Contains("\"epochs\""));
  CHECK_THROWS_WITH(config_from_json(json{{"use_gpe", 1}}), doctest::Contains("\"use_gpe\""));
  CHECK_THROWS_WITH(config_from_json(json{{"backbone_channels", {4, -8}}}), doctest::Contains("backbone_channels"));
  CHECK_THROWS(config_from_json(json::array()));
  auto c = config_from_json(json{{"head_levels", "two"}});
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("head_levels"));
  CHECK_THROWS(config_from_json(json{{"batch_size", 0}}).validate());
}

TEST_CASE("three-level head config") {
  const auto c = config_from_json(json{{"head_levels", "three"}});
  const auto m = c.model();
  REQUIRE(m.head.levels.size() == 3);
  CHECK(m.head.levels[2].stride == 32);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("bad commands and flags print usage and fail") {
  auto r = run_cli({"frobnicate"});
  CHECK(r.code != 0);
  CHECK(r.err.find("Usage") != std::string::npos);
  r = run_cli({});
  CHECK(r.code != 0);
  r = run_cli({"train"});  // --out is required
  CHECK(r.code != 0);
  CHECK(r.err.find("--out") != std::string::npos);
  r = run_cli({"gen-data", "--out", "x", "--bogus"});
  CHECK(r.code != 0);
  r = run_cli({"gen-data", "--out", "x", "--seed", "abc"});
  CHECK(r.code != 0);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("unknown config keys fail the command") {
  const auto dir = temp_dir("unknown");
  write_text(dir / "c.json", R"({"bogus": 1})");
  const auto r = run_cli({"gen-data", "--config", (dir / "c.json").string(), "--out", (dir / "d").string()});
  CHECK(r.code != 0);
  CHECK(r.err.find("unknown key \"bogus\"") != std::string::npos);
  CHECK(!fs::exists(dir / "d"));
}

TEST_CASE("gen-data with the same seed is byte-identical") {
  const auto dir = temp_dir("gen");
  const auto cfg = tiny_config(dir).string();
  REQUIRE(run_cli({"gen-data", "--config", cfg, "--seed", "0", "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run_cli({"gen-data", "--config", cfg, "--seed", "0", "--out", (dir / "b").string()}).code == 0);
  REQUIRE(run_cli({"gen-data", "--config", cfg, "--seed", "1", "--out", (dir / "c").string()}).code == 0);
  const auto a = tree_bytes(dir / "a"), b = tree_bytes(dir / "b");
  CHECK(a.size() == 1 + 1 + 2 * 11);  // annotations, config, 11 image pairs
  CHECK(a == b);
  CHECK(read_bytes(dir / "a" / "annotations.jsonl") == read_bytes(dir / "b" / "annotations.jsonl"));
  CHECK(read_bytes(dir / "a" / "annotations.jsonl") != read_bytes(dir / "c" / "annotations.jsonl"));
  // The written data set loads back and the seed flag is echoed.
  CHECK(load_dataset(dir / "a" / "annotations.jsonl").size() == 11);
  CHECK(json::parse(read_bytes(dir / "c" / "config.json"))["seed"] == 1);
}

TEST_CASE("eval on a perfect-prediction fixture prints 100.00 / 100.00") {
  const fs::path fixture = AFGEO_FIXTURE_DIR "/perfect";
  const auto r = run_cli({"eval", "--config", (fixture / "config.json").string(), "--predictions",
                      (fixture / "predictions.csv").string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(std::regex_search(r.out, std::regex(R"(validation\s+3\s+100\.00\s+100\.00\s+1\.0000)")));
}

TEST_CASE("eval of a predictions file must cover the split exactly") {
  const fs::path fixture = AFGEO_FIXTURE_DIR "/perfect";
  const auto dir = temp_dir("preds");
  const auto cfg = (fixture / "config.json").string();
  std::string lines = read_bytes(fixture / "predictions.csv");
  write_text(dir / "missing.csv", lines.substr(0, lines.find('\n') + 1));
  auto r = run_cli({"eval", "--config", cfg, "--predictions", (dir / "missing.csv").string()});
  CHECK(r.code != 0);
  CHECK(r.err.find("no prediction for sample") != std::string::npos);
  write_text(dir / "extra.csv", lines + "zzz,1,1,2,2,0.5\n");
  r = run_cli({"eval", "--config", cfg, "--predictions", (dir / "extra.csv").string()});
  CHECK(r.err.find("unknown sample 'zzz'") != std::string::npos);
  write_text(dir / "bad.csv", "s000000,1,x,2,2,0.5\n");
  r = run_cli({"eval", "--config", cfg, "--predictions", (dir / "bad.csv").string()});
  CHECK(r.err.find("bad.csv:1:") != std::string::npos);
}

TEST_CASE("shifted predictions give the enumerated accuracies") {
  // Boxes 10 wide: shifting by 0 keeps IoU 1, by 5 gives 1/3.
  const auto dir = temp_dir("shift");
  std::vector<GeoSample> samples;
  for (int i = 0; i < 3; ++i) {
    GeoSample s;
    s.sample_id = "p" + std::to_string(i);
    s.query = Image(3, 64, 64);
    s.reference = Image(3, 128, 128);
    s.click = {10, 10};
    s.gt_box = {10, 10, 20, 20};
    samples.push_back(s);
  }
  save_dataset(dir, samples);
  write_text(dir / "c.json", R"({"data": "annotations.jsonl", "train_samples": 0, "val_samples": 3})");
  write_text(dir / "p.csv", "p0,10,10,20,20,0.9\np1,15,10,25,20,0.9\np2,10,10,20,20,0.9\n");
  const auto r = run_cli({"eval", "--config", (dir / "c.json").string(), "--predictions", (dir / "p.csv").string()});
  INFO(r.err);
  CHECK(std::regex_search(r.out, std::regex(R"(validation\s+3\s+100\.00\s+66\.67)")));
}

TEST_CASE("train writes the run directory and later commands use it") {
  const auto dir = temp_dir("train");
  const auto run_dir = dir / "run";
  auto r = run_cli({"train", "--config", tiny_config(dir).string(), "--out", run_dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  for (const char* p : {"config.json", "checkpoints/epoch_001.afgeo", "checkpoints/epoch_002.afgeo",
                        "checkpoints/latest.afgeo", "checkpoints/latest.json", "logs/train.log",
                        "reports/validation.json"}) {
    CHECK_MESSAGE(fs::exists(run_dir / p), p);
  }
  // Effective config echoed with every key.
  const auto echoed = json::parse(read_bytes(run_dir / "config.json"));
  CHECK(echoed.size() == to_json(CliConfig{}).size());
  CHECK(echoed["epochs"] == 2);

  // Log: header plus one tab-separated line per step, mirrored on stdout.
  const std::string log = read_bytes(run_dir / "logs" / "train.log");
  CHECK(log.rfind("step\ttotal\tcls\tcn\treg\tn_pos\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 1 + 4);
  CHECK(r.out.rfind(log, 0) == 0);
  CHECK(std::regex_search(log, std::regex(R"(\n3\t[0-9.]+\t[0-9.]+\t[0-9.]+\t[0-9.]+\t[0-9]+\n)")));

  const auto report = json::parse(read_bytes(run_dir / "reports" / "validation.json"));
  CHECK(report["count"] == 3);
  CHECK(report["predictions"].size() == 3);
  CHECK(report["acc_at_50"].get<double>() <= report["acc_at_25"].get<double>());
  CHECK(r.out.find("acc@0.25(%)") != std::string::npos);

  const auto cfg = (run_dir / "config.json").string();
  const auto ckpt = (run_dir / "checkpoints" / "latest.afgeo").string();

  // eval reproduces the training report.
  r = run_cli({"eval", "--config", cfg, "--checkpoint", ckpt, "--out", run_dir.string()});
  REQUIRE(r.code == 0);
  CHECK(read_bytes(run_dir / "reports" / "eval.json") == read_bytes(run_dir / "reports" / "validation.json"));
  // Without --config the default data sizes do not fit this checkpoint.
  r = run_cli({"eval", "--checkpoint", ckpt});
  CHECK(r.code != 0);
  CHECK(r.err.find("--config") != std::string::npos);

  // infer: one CSV line per validation sample with two decimals.
  r = run_cli({"infer", "--config", cfg, "--checkpoint", ckpt});
  REQUIRE(r.code == 0);
  const std::regex line(R"(s0000(08|09|10)(,-?[0-9]+\.[0-9]{2}){5})");
  std::istringstream lines(r.out);
  int n = 0;
  for (std::string l; std::getline(lines, l); ++n) CHECK_MESSAGE(std::regex_match(l, line), l);
  CHECK(n == 3);
  const auto one = run_cli({"infer", "--config", cfg, "--checkpoint", ckpt, "--sample-id", "s000009"});
  const auto second = r.out.find('\n') + 1;
  CHECK(one.out == r.out.substr(second, r.out.find('\n', second) + 1 - second));
  CHECK(run_cli({"infer", "--config", cfg, "--checkpoint", ckpt, "--sample-id", "nope"}).code != 0);

  // export-heatmap: GPE on the query grid, a1 on the reference grid.
  r = run_cli({"export-heatmap", "--config", cfg, "--checkpoint", ckpt, "--sample-id", "s000008", "--out",
           (dir / "heat").string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto gpe = read_pnm(dir / "heat" / "s000008_gpe.pgm");
  const auto a1 = read_pnm(dir / "heat" / "s000008_a1.pgm");
  CHECK(gpe.channels == 1);
  CHECK(gpe.height == 8);
  CHECK(a1.height == 16);
  CHECK(*std::max_element(a1.pixels.begin(), a1.pixels.end()) == 255);
  CHECK(*std::min_element(a1.pixels.begin(), a1.pixels.end()) == 0);

  // A config whose model differs from the checkpoint is rejected.
  const auto other = tiny_config(dir, R"(, "use_cvoam": false)").string();
  r = run_cli({"eval", "--config", other, "--checkpoint", ckpt});
  CHECK(r.code != 0);
  CHECK(r.err.find("use_cvoam") != std::string::npos);
}

TEST_CASE("two identical train commands write identical files") {
  const auto dir = temp_dir("train_det");
  const auto cfg = tiny_config(dir).string();
  REQUIRE(run_cli({"train", "--config", cfg, "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run_cli({"train", "--config", cfg, "--out", (dir / "b").string()}).code == 0);
  CHECK(tree_bytes(dir / "a") == tree_bytes(dir / "b"));
}

TEST_CASE("selftest table and census failure") {
  std::vector<SelftestCheck> checks{
      {"spot values", [] { return verify::check_spot_values(); }},
      {"parameter census", [] { return verify::check_census(ModelConfig{}); }},
  };
  std::ostringstream out, err;
  CHECK(run_selftest(checks, out, err) == 0);
  CHECK(out.str().find("parameter census") != std::string::npos);
  CHECK(out.str().find("PASS") != std::string::npos);
  CHECK(err.str().empty());

  // Adding a trainable parameter under "cvoam." must fail the run and name the check.
  checks[1].run = [] {
    const Model<float> model{ModelConfig{}};
    auto census = param_census<float>(model.parameters());
    census["cvoam.gate_weight"] = 64;
    return verify::check_census(census);
  };
  std::ostringstream out2, err2;
  CHECK(run_selftest(checks, out2, err2) != 0);
  CHECK(out2.str().find("FAIL") != std::string::npos);
  CHECK(out2.str().find("cvoam.gate_weight") != std::string::npos);
  CHECK(err2.str().find("selftest failed: parameter census") != std::string::npos);

  // A throwing check fails with its message rather than aborting the run.
  checks.push_back({"boom", []() -> verify::CheckResult { throw std::runtime_error("kaput"); }});
  std::ostringstream out3, err3;
  CHECK(run_selftest(checks, out3, err3) != 0);
  CHECK(out3.str().find("kaput") != std::string::npos);
}

TEST_CASE("census violations") {
  CHECK(verify::census_violations({{"gpe.sigma", 1}, {"head.cls_out.weight", 9}}).empty());
  CHECK(verify::census_violations({{"head.cls_out.weight", 9}}).size() == 1);
  CHECK(verify::census_violations({{"gpe.sigma", 2}}).size() == 1);
  CHECK(verify::census_violations({{"gpe.sigma", 1}, {"cvoam.w", 1}}).size() == 1);
  CHECK(verify::check_census(ModelConfig{}).passed);
  ModelConfig no_gpe;
  no_gpe.use_gpe = false;
  const auto r = verify::check_census(no_gpe);
  CHECK(!r.passed);
  CHECK(r.detail.find("gpe.sigma missing") != std::string::npos);
}
