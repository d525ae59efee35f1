#pragma once

// The full localization network: a shared convolutional backbone for both
// views, Gaussian click encoding injected into the query features, CVOAM
// fusion into the reference features, and an anchor-free head.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afgeo/gpe.hpp"
#include "afgeo/head.hpp"
#include "afgeo/sample.hpp"
#include "afgeo/tensor.hpp"

namespace afgeo {

struct ModelConfig {
  std::vector<std::size_t> backbone_channels{16, 32, 64};
  std::vector<std::size_t> backbone_strides{2, 2, 2};
  /// 3x3 conv + activation layers in each head branch before its output conv.
  std::size_t head_convs = 1;
  HeadConfig head;
  GpeConfig gpe;
  std::size_t query_h = 64, query_w = 64;
  std::size_t reference_h = 128, reference_w = 128;
  std::uint64_t seed = 0;
  bool use_gpe = true;
  bool use_cvoam = true;

  std::size_t total_stride() const;
  void validate() const;

  bool operator==(const ModelConfig&) const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Intermediate maps kept for visualisation.
template <typename T>
struct ForwardTrace {
  Tensor<T> gpe_map;  // query feature grid
  Tensor<T> a1;       // reference feature grid
  Tensor<T> a2;       // per channel
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }

  /// Runs with the model's own parameters.
  std::vector<HeadOutput<T>> forward(const GeoSample& sample, ForwardTrace<T>* trace = nullptr) const;
  /// Runs with a parameter set laid out like parameters(), e.g. per-thread aliases.
  std::vector<HeadOutput<T>> forward(const GeoSample& sample, std::span<const Parameter<T>> params,
                                     ForwardTrace<T>* trace = nullptr) const;
  std::vector<HeadOutput<T>> forward(const Tensor<T>& query, ClickPoint click, const Tensor<T>& reference,
                                     std::span<const Parameter<T>> params, ForwardTrace<T>* trace = nullptr) const;

  /// Grid of each head level for the configured reference size.
  std::vector<GridSize> level_grids() const;
  /// Feature grid of the query branch.
  GridSize query_grid() const;

  void zero_grad();

 private:
  struct ConvRef {
    std::size_t weight = 0, bias = 0;
    std::size_t stride = 1, padding = 1;
  };

  std::size_t add_param(std::string name, Shape shape);
  Tensor<T> backbone(const Tensor<T>& image, std::span<const Parameter<T>> params) const;
  HeadOutput<T> head(const Tensor<T>& fused, double stride, std::span<const Parameter<T>> params) const;

  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<ConvRef> stages_;
  std::vector<ConvRef> cls_tower_, reg_tower_;
  ConvRef cls_out_, reg_out_;
  std::size_t sigma_ = 0, proj_ = 0;
};

/// Trainable element count per parameter name.
template <typename T>
std::map<std::string, std::size_t> param_census(std::span<const Parameter<T>> params);

/// JSON file holding the ModelConfig of a checkpoint: same path, ".json" extension.
std::filesystem::path model_config_path(const std::filesystem::path& checkpoint);

/// Writes the checkpoint and its config file (each via a temporary and rename).
template <typename T>
void save_model(const std::filesystem::path& checkpoint, const Model<T>& model);
/// Builds the model from the config stored beside the checkpoint.
template <typename T>
Model<T> load_model(const std::filesystem::path& checkpoint);
/// As above, but throws unless the stored config equals `expected`.
template <typename T>
Model<T> load_model(const std::filesystem::path& checkpoint, const ModelConfig& expected);

}  // namespace afgeo
