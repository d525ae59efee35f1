#include "afgeo/model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

#include "afgeo/checkpoint.hpp"
#include "afgeo/cvoam.hpp"
#include "afgeo/ops.hpp"

namespace afgeo {

template <typename T>
Tensor<T> image_tensor(const Image& image) {
  std::vector<T> values(image.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(image.pixels[i] / 127.5 - 1.0);
  return Tensor<T>::from_vector({image.channels, image.height, image.width}, std::move(values));
}

template Tensor<float> image_tensor(const Image&);
template Tensor<double> image_tensor(const Image&);

std::size_t ModelConfig::total_stride() const {
  std::size_t s = 1;
  for (auto v : backbone_strides) s *= v;
  return s;
}

void ModelConfig::validate() const {
  if (backbone_channels.empty()) throw std::invalid_argument("model config: backbone_channels is empty");
  if (backbone_channels.size() != backbone_strides.size()) {
    throw std::invalid_argument("model config: backbone_channels and backbone_strides differ in length");
  }
  for (auto c : backbone_channels) {
    if (c == 0) throw std::invalid_argument("model config: backbone channel count must be positive");
  }
  for (auto s : backbone_strides) {
    if (s == 0) throw std::invalid_argument("model config: backbone stride must be positive");
  }
  head.validate();
  const auto ts = static_cast<double>(total_stride());
  if (head.levels.front().stride != ts) {
    throw std::invalid_argument("model config: first head level stride " + std::to_string(head.levels.front().stride) +
                                " must equal the backbone stride " + std::to_string(total_stride()));
  }
  for (const auto& level : head.levels) {
    const double k = level.stride / ts;
    if (k != std::floor(k) || k < 1) {
      throw std::invalid_argument("model config: head level stride " + std::to_string(level.stride) +
                                  " is not a multiple of the backbone stride");
    }
    const auto ls = static_cast<std::size_t>(level.stride);
    if (reference_h % ls != 0 || reference_w % ls != 0) {
      throw std::invalid_argument("model config: reference size " + std::to_string(reference_h) + "x" +
                                  std::to_string(reference_w) + " is not divisible by head stride " +
                                  std::to_string(ls));
    }
  }
  if (query_h == 0 || query_w == 0 || query_h % total_stride() != 0 || query_w % total_stride() != 0) {
    throw std::invalid_argument("model config: query size must be a positive multiple of the backbone stride");
  }
  if (!(gpe.sigma_floor > 0)) throw std::invalid_argument("model config: gpe sigma_floor must be positive");
  const double sigma0 = gpe.sigma_init > 0
                            ? gpe.sigma_init
                            : static_cast<double>(std::max(query_h, query_w) / total_stride()) / 8.0;
  if (!(sigma0 > gpe.sigma_floor)) {
    throw std::invalid_argument("model config: initial gpe sigma " + std::to_string(sigma0) +
                                " must exceed the floor " + std::to_string(gpe.sigma_floor));
  }
}

bool ModelConfig::operator==(const ModelConfig& o) const { return to_json(*this) == to_json(o); }

nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : cfg.head.levels) {
    levels.push_back({{"stride", l.stride},
                      {"min_size", l.min_size},
                      {"max_size", std::isinf(l.max_size) ? nlohmann::json(nullptr) : nlohmann::json(l.max_size)}});
  }
  return {{"backbone_channels", cfg.backbone_channels},
          {"backbone_strides", cfg.backbone_strides},
          {"head_convs", cfg.head_convs},
          {"head_levels", levels},
          {"radius_rho", cfg.head.radius_rho},
          {"gpe_sigma_init", cfg.gpe.sigma_init},
          {"gpe_sigma_floor", cfg.gpe.sigma_floor},
          {"query_h", cfg.query_h},
          {"query_w", cfg.query_w},
          {"reference_h", cfg.reference_h},
          {"reference_w", cfg.reference_w},
          {"seed", cfg.seed},
          {"use_gpe", cfg.use_gpe},
          {"use_cvoam", cfg.use_cvoam}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const nlohmann::json expected = to_json(cfg);
  for (const auto& [key, _] : j.items()) {
    if (!expected.contains(key)) throw std::invalid_argument("model config: unknown key '" + key + "'");
  }
  for (const auto& [key, _] : expected.items()) {
    if (!j.contains(key)) throw std::invalid_argument("model config: missing key '" + key + "'");
  }
  cfg.backbone_channels = j.at("backbone_channels").get<std::vector<std::size_t>>();
  cfg.backbone_strides = j.at("backbone_strides").get<std::vector<std::size_t>>();
  cfg.head_convs = j.at("head_convs").get<std::size_t>();
  cfg.head.levels.clear();
  for (const auto& l : j.at("head_levels")) {
    LevelSpec spec;
    spec.stride = l.at("stride").get<double>();
    spec.min_size = l.at("min_size").get<double>();
    spec.max_size = l.at("max_size").is_null() ? std::numeric_limits<double>::infinity() : l.at("max_size").get<double>();
    cfg.head.levels.push_back(spec);
  }
  cfg.head.radius_rho = j.at("radius_rho").get<double>();
  cfg.gpe.sigma_init = j.at("gpe_sigma_init").get<double>();
  cfg.gpe.sigma_floor = j.at("gpe_sigma_floor").get<double>();
  cfg.query_h = j.at("query_h").get<std::size_t>();
  cfg.query_w = j.at("query_w").get<std::size_t>();
  cfg.reference_h = j.at("reference_h").get<std::size_t>();
  cfg.reference_w = j.at("reference_w").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.use_gpe = j.at("use_gpe").get<bool>();
  cfg.use_cvoam = j.at("use_cvoam").get<bool>();
  cfg.validate();
  return cfg;
}

namespace {

// Prior probability of the classification output at initialisation.
constexpr double kClsPrior = 0.01;
// 1 / sqrt(E[silu(z)^2]) for z ~ N(0,1): keeps activation variance stable
// through SiLU layers (the SiLU analogue of He initialisation's sqrt(2)).
constexpr double kSiluGain = 1.6765324703310909;
// Initial raw log-offset: offsets start at e^0.5 ~ 1.65 strides, about the
// half-extent of a typical object. The irrational multiple also keeps initial
// box edges off the integer pixel lattice, where GIoU has kinks.
constexpr double kOffsetBiasInit = 0.5;

}  // namespace

template <typename T>
std::size_t Model<T>::add_param(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor<T>::zeros(std::move(shape), true)});
  return params_.size() - 1;
}

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);

  auto init_normal = [&](std::size_t index, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : params_[index].tensor.mutable_values()) v = static_cast<T>(dist(rng));
  };
  // Variance-preserving initialisation for hidden convs; small weights for output convs.
  auto add_conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t stride,
                      double stddev) {
    ConvRef ref;
    ref.weight = add_param(name + ".weight", {out, in, 3, 3});
    ref.bias = add_param(name + ".bias", {out});
    ref.stride = stride;
    ref.padding = 1;
    init_normal(ref.weight, stddev > 0 ? stddev : kSiluGain / std::sqrt(static_cast<double>(in * 9)));
    return ref;
  };

  std::size_t in = 3;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const std::size_t out = cfg_.backbone_channels[i];
    stages_.push_back(add_conv("backbone.stage" + std::to_string(i), in, out, cfg_.backbone_strides[i], 0));
    in = out;
  }
  const std::size_t c = in;

  if (cfg_.use_gpe) {
    const auto grid = query_grid();
    const double sigma0 = cfg_.gpe.sigma_init > 0 ? cfg_.gpe.sigma_init
                                                  : static_cast<double>(std::max(grid.h, grid.w)) / 8.0;
    sigma_ = add_param("gpe.sigma", {1});
    params_[sigma_].tensor.mutable_values()[0] = static_cast<T>(raw_sigma_for(sigma0, cfg_.gpe.sigma_floor));
    // Identity on the feature channels plus a small random weight on the encoding.
    proj_ = add_param("gpe.proj", {c, c + 1, 1, 1});
    auto w = params_[proj_].tensor.mutable_values();
    std::normal_distribution<double> dist(0.0, 0.1);
    for (std::size_t o = 0; o < c; ++o) {
      w[o * (c + 1) + o] = T(1);
      w[o * (c + 1) + c] = static_cast<T>(dist(rng));
    }
  }

  for (std::size_t i = 0; i < cfg_.head_convs; ++i) {
    cls_tower_.push_back(add_conv("head.cls_tower" + std::to_string(i), c, c, 1, 0));
  }
  for (std::size_t i = 0; i < cfg_.head_convs; ++i) {
    reg_tower_.push_back(add_conv("head.reg_tower" + std::to_string(i), c, c, 1, 0));
  }
  cls_out_ = add_conv("head.cls_out", c, 1, 1, 0.01);
  params_[cls_out_.bias].tensor.mutable_values()[0] = static_cast<T>(-std::log((1.0 - kClsPrior) / kClsPrior));
  // Channel 0 is centerness, channels 1..4 the raw (l,t,r,b) log-offsets.
  reg_out_ = add_conv("head.reg_out", c, 5, 1, 0.01);
  for (std::size_t k = 1; k < 5; ++k) params_[reg_out_.bias].tensor.mutable_values()[k] = static_cast<T>(kOffsetBiasInit);
}

template <typename T>
GridSize Model<T>::query_grid() const {
  return {cfg_.query_h / cfg_.total_stride(), cfg_.query_w / cfg_.total_stride()};
}

template <typename T>
std::vector<GridSize> Model<T>::level_grids() const {
  std::vector<GridSize> grids;
  for (const auto& level : cfg_.head.levels) {
    const auto s = static_cast<std::size_t>(level.stride);
    grids.push_back({cfg_.reference_h / s, cfg_.reference_w / s});
  }
  return grids;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Model<T>::backbone(const Tensor<T>& image, std::span<const Parameter<T>> params) const {
  Tensor<T> x = image;
  for (const auto& st : stages_) {
    x = silu(conv2d(x, params[st.weight].tensor, params[st.bias].tensor, st.stride, st.padding));
  }
  return x;
}

template <typename T>
HeadOutput<T> Model<T>::head(const Tensor<T>& fused, double stride, std::span<const Parameter<T>> params) const {
  auto run = [&](const std::vector<ConvRef>& tower, const ConvRef& out) {
    Tensor<T> x = fused;
    for (const auto& cv : tower) x = silu(conv2d(x, params[cv.weight].tensor, params[cv.bias].tensor, 1, 1));
    return conv2d(x, params[out.weight].tensor, params[out.bias].tensor, 1, 1);
  };
  const Tensor<T> cls = run(cls_tower_, cls_out_);
  const Tensor<T> reg = run(reg_tower_, reg_out_);
  const std::size_t h = fused.dim(1), w = fused.dim(2);
  HeadOutput<T> out;
  out.cls_logits = reshape(cls, {h, w});
  out.ctr_logits = reshape(slice(reg, 0, 0, 1), {h, w});
  out.offsets = scale(exp(slice(reg, 0, 1, 4)), static_cast<T>(stride));
  out.stride = stride;
  return out;
}

template <typename T>
std::vector<HeadOutput<T>> Model<T>::forward(const Tensor<T>& query, ClickPoint click, const Tensor<T>& reference,
                                             std::span<const Parameter<T>> params, ForwardTrace<T>* trace) const {
  if (params.size() != params_.size()) {
    throw std::invalid_argument("model: expected " + std::to_string(params_.size()) + " parameters, got " +
                                std::to_string(params.size()));
  }
  const Shape qshape{3, cfg_.query_h, cfg_.query_w}, rshape{3, cfg_.reference_h, cfg_.reference_w};
  if (query.shape() != qshape) {
    throw std::invalid_argument("model: query shape " + shape_str(query.shape()) + ", expected " + shape_str(qshape));
  }
  if (reference.shape() != rshape) {
    throw std::invalid_argument("model: reference shape " + shape_str(reference.shape()) + ", expected " +
                                shape_str(rshape));
  }

  Tensor<T> f_q = backbone(query, params);
  const Tensor<T> f_r = backbone(reference, params);

  if (cfg_.use_gpe) {
    const auto grid = query_grid();
    const ClickPoint fc = scale_click(click, cfg_.query_h, cfg_.query_w, grid.h, grid.w);
    const Tensor<T> p_map = gpe_map(grid.h, grid.w, fc, params[sigma_].tensor, cfg_.gpe.sigma_floor);
    f_q = inject_gpe(f_q, p_map, params[proj_].tensor);
    if (trace) trace->gpe_map = p_map;
  }

  Tensor<T> fused = f_r;
  if (cfg_.use_cvoam) {
    auto co = cvoam(f_q, f_r);
    fused = co.fused;
    if (trace) {
      trace->a1 = co.spatial.a1;
      trace->a2 = co.channel.a2;
    }
  }

  std::vector<HeadOutput<T>> outputs;
  const double base = static_cast<double>(cfg_.total_stride());
  for (const auto& level : cfg_.head.levels) {
    const auto k = static_cast<std::size_t>(level.stride / base);
    const Tensor<T> x = k == 1 ? fused : avg_pool2d(fused, k);
    outputs.push_back(head(x, level.stride, params));
  }
  return outputs;
}

template <typename T>
std::vector<HeadOutput<T>> Model<T>::forward(const GeoSample& sample, std::span<const Parameter<T>> params,
                                             ForwardTrace<T>* trace) const {
  return forward(image_tensor<T>(sample.query), sample.click, image_tensor<T>(sample.reference), params, trace);
}

template <typename T>
std::vector<HeadOutput<T>> Model<T>::forward(const GeoSample& sample, ForwardTrace<T>* trace) const {
  return forward(sample, parameters(), trace);
}

template <typename T>
std::map<std::string, std::size_t> param_census(std::span<const Parameter<T>> params) {
  std::map<std::string, std::size_t> census;
  for (const auto& p : params) {
    if (!census.emplace(p.name, p.tensor.numel()).second) {
      throw std::logic_error("param_census: duplicate parameter name '" + p.name + "'");
    }
  }
  return census;
}

std::filesystem::path model_config_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

template <typename T>
void save_model(const std::filesystem::path& checkpoint, const Model<T>& model) {
  const auto cfg_path = model_config_path(checkpoint);
  auto tmp_cfg = cfg_path;
  tmp_cfg += ".tmp";
  {
    std::ofstream os(tmp_cfg);
    if (!os) throw std::runtime_error("cannot open " + tmp_cfg.string() + " for writing");
    os << to_json(model.config()).dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + tmp_cfg.string());
  }
  auto tmp_ckpt = checkpoint;
  tmp_ckpt += ".tmp";
  save_checkpoint<T>(tmp_ckpt, model.parameters());
  std::filesystem::rename(tmp_cfg, cfg_path);
  std::filesystem::rename(tmp_ckpt, checkpoint);
}

template <typename T>
Model<T> load_model(const std::filesystem::path& checkpoint) {
  const auto cfg_path = model_config_path(checkpoint);
  std::ifstream is(cfg_path);
  if (!is) throw std::runtime_error("missing model config " + cfg_path.string() + " beside checkpoint");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(is));
  } catch (const std::exception& e) {
    throw std::runtime_error("model config " + cfg_path.string() + ": " + e.what());
  }
  Model<T> model(cfg);
  load_checkpoint<T>(checkpoint, model.parameters());
  return model;
}

template <typename T>
Model<T> load_model(const std::filesystem::path& checkpoint, const ModelConfig& expected) {
  Model<T> model = load_model<T>(checkpoint);
  if (!(model.config() == expected)) {
    const auto stored = to_json(model.config()), want = to_json(expected);
    std::string diff;
    for (const auto& [key, value] : want.items()) {
      if (stored.at(key) != value) diff += (diff.empty() ? "" : ", ") + key;
    }
    throw std::runtime_error("checkpoint " + checkpoint.string() + " was trained with a different model config (" +
                             diff + ")");
  }
  return model;
}

template class Model<float>;
template class Model<double>;
template std::map<std::string, std::size_t> param_census(std::span<const Parameter<float>>);
template std::map<std::string, std::size_t> param_census(std::span<const Parameter<double>>);
template void save_model(const std::filesystem::path&, const Model<float>&);
template void save_model(const std::filesystem::path&, const Model<double>&);
template Model<float> load_model(const std::filesystem::path&);
template Model<double> load_model(const std::filesystem::path&);
template Model<float> load_model(const std::filesystem::path&, const ModelConfig&);
template Model<double> load_model(const std::filesystem::path&, const ModelConfig&);

}  // namespace afgeo
