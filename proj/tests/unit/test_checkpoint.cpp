#include <filesystem>
#include <fstream>

#include "afgeo/checkpoint.hpp"
#include "doctest.h"

using namespace afgeo;
namespace fs = std::filesystem;

namespace {

std::vector<Parameter<float>> make_params() {
  return {{"a.weight", Tensor<float>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true)},
          {"a.bias", Tensor<float>::from_vector({1}, {-0.5f}, true)}};
}

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "afgeo_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  auto params = make_params();
  const auto path = temp_file("rt.afgeo");
  save_checkpoint<float>(path, params);
  {
    std::ifstream is(path, std::ios::binary);
    char magic[6];
    is.read(magic, 6);
    CHECK(std::string(magic, 6) == "AFGEO1");
  }
  auto loaded = make_params();
  for (auto& p : loaded) std::fill(p.tensor.mutable_values().begin(), p.tensor.mutable_values().end(), 0.0f);
  load_checkpoint<float>(path, loaded);
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(loaded[i].tensor.to_vector() == params[i].tensor.to_vector());
}

TEST_CASE("double parameters round trip through float storage") {
  std::vector<Parameter<double>> params{{"x", Tensor<double>::from_vector({2}, {0.25, -3.5}, true)}};
  const auto path = temp_file("d.afgeo");
  save_checkpoint<double>(path, params);
  std::vector<Parameter<double>> loaded{{"x", Tensor<double>::zeros({2}, true)}};
  load_checkpoint<double>(path, loaded);
  CHECK(loaded[0].tensor.to_vector() == std::vector<double>{0.25, -3.5});
}

TEST_CASE("checkpoint mismatches are rejected without partial writes") {
  auto params = make_params();
  const auto path = temp_file("mm.afgeo");
  save_checkpoint<float>(path, params);

  auto renamed = make_params();
  renamed[1].name = "a.offset";
  renamed[0].tensor.mutable_values()[0] = 42.0f;
  CHECK_THROWS(load_checkpoint<float>(path, renamed));
  CHECK(renamed[0].tensor.values()[0] == 42.0f);

  std::vector<Parameter<float>> reshaped{{"a.weight", Tensor<float>::zeros({3, 2}, true)},
                                         {"a.bias", Tensor<float>::zeros({1}, true)}};
  CHECK_THROWS(load_checkpoint<float>(path, reshaped));

  std::vector<Parameter<float>> fewer{{"a.weight", Tensor<float>::zeros({2, 3}, true)}};
  CHECK_THROWS(load_checkpoint<float>(path, fewer));

  auto more = make_params();
  more.push_back({"b", Tensor<float>::zeros({1}, true)});
  CHECK_THROWS(load_checkpoint<float>(path, more));

  const auto bad = temp_file("bad.afgeo");
  std::ofstream(bad, std::ios::binary) << "AFGEO2xxxx";
  auto p2 = make_params();
  CHECK_THROWS(load_checkpoint<float>(bad, p2));

  // Truncation.
  std::ifstream is(path, std::ios::binary);
  std::string bytes(std::istreambuf_iterator<char>(is), {});
  std::ofstream(temp_file("trunc.afgeo"), std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS(load_checkpoint<float>(temp_file("trunc.afgeo"), p2));
  CHECK_THROWS(load_checkpoint<float>(temp_file("missing.afgeo"), p2));
}
