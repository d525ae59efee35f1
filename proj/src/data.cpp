#include "afgeo/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace afgeo {

void SynthConfig::validate() const {
  if (query_size < 8 || reference_size < 8) throw std::invalid_argument("synth config: image sizes must be >= 8");
  if (min_shapes < 1 || max_shapes < min_shapes) throw std::invalid_argument("synth config: bad shape count range");
  if (!(min_object >= 2 && max_object >= min_object && max_object < static_cast<double>(reference_size) / 2)) {
    throw std::invalid_argument("synth config: bad object size range");
  }
  if (!(min_window_scale >= 1 && max_window_scale >= min_window_scale)) {
    throw std::invalid_argument("synth config: bad window scale range");
  }
  if (!(max_center_jitter >= 0 && max_center_jitter < 0.5)) {
    throw std::invalid_argument("synth config: max_center_jitter must be in [0, 0.5)");
  }
  if (!(click_noise >= 0 && click_noise <= 0.1)) throw std::invalid_argument("synth config: click_noise must be in [0, 0.1]");
  if (!(flip_probability >= 0 && flip_probability <= 1)) {
    throw std::invalid_argument("synth config: flip_probability must be in [0, 1]");
  }
}

std::string synthetic_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", index);
  return buf;
}

namespace {

// Distribution code is written out so streams do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x41464745u};
    engine_.seed(seq);
  }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  bool chance(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

using Rgb = std::array<double, 3>;

// Saturated colours, far from the muted background.
constexpr std::array<Rgb, 8> kPalette{{{0.90, 0.10, 0.10},
                                       {0.10, 0.80, 0.15},
                                       {0.15, 0.25, 0.95},
                                       {0.95, 0.90, 0.10},
                                       {0.90, 0.10, 0.90},
                                       {0.10, 0.90, 0.90},
                                       {1.00, 0.55, 0.05},
                                       {0.50, 0.10, 0.70}}};

enum class ShapeKind { kRectangle, kEllipse, kTriangle };

struct Shape2d {
  Box box;
  ShapeKind kind;
  Rgb colour;
};

bool covers(const Shape2d& s, double x, double y) {
  const Box& b = s.box;
  if (x < b.x_min || x >= b.x_max || y < b.y_min || y >= b.y_max) return false;
  switch (s.kind) {
    case ShapeKind::kRectangle:
      return true;
    case ShapeKind::kEllipse: {
      const double u = (x - b.center_x()) / (b.width() / 2), v = (y - b.center_y()) / (b.height() / 2);
      return u * u + v * v <= 1.0;
    }
    case ShapeKind::kTriangle: {
      // Apex at the top centre, base along the bottom edge.
      const double frac = (y - b.y_min) / b.height();
      return std::abs(x - b.center_x()) <= frac * b.width() / 2 + 0.5;
    }
  }
  return false;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

Image render_reference(const SynthConfig& cfg, Rng& rng, const std::vector<Shape2d>& shapes) {
  const std::size_t n = cfg.reference_size;
  Image img(3, n, n);
  Rgb base;
  const double grey = rng.uniform(0.35, 0.65);
  for (auto& c : base) c = grey + rng.uniform(-0.05, 0.05);
  const double angle = rng.uniform(0, std::numbers::pi);
  const double freq = rng.uniform(0.1, 0.4);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double stripe = 0.08 * std::sin(freq * (ca * px + sa * py));
      const Shape2d* top = nullptr;
      for (const auto& s : shapes) {
        if (covers(s, px, py)) top = &s;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.04, 0.04);
        const double v = top ? top->colour[c] + noise : base[c] + stripe + noise;
        img.at(c, y, x) = to_byte(v);
      }
    }
  }
  return img;
}

double bilinear(const Image& img, std::size_t c, double y, double x) {
  // (x,y) in pixel-centre coordinates; borders are replicated.
  const double maxx = static_cast<double>(img.width - 1), maxy = static_cast<double>(img.height - 1);
  x = std::clamp(x, 0.0, maxx);
  y = std::clamp(y, 0.0, maxy);
  const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = img.value(c, y0, x0) * (1 - fx) + img.value(c, y0, x1) * fx;
  const double bot = img.value(c, y1, x0) * (1 - fx) + img.value(c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

GeoSample generate_sample(const SynthConfig& cfg, std::uint64_t seed, std::size_t index, QueryView* view) {
  cfg.validate();
  Rng rng(seed, index);
  const double n = static_cast<double>(cfg.reference_size);

  // Palette order without replacement gives every shape a distinct colour.
  std::array<std::size_t, kPalette.size()> order;
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  const std::size_t wanted =
      std::min(cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1), kPalette.size());
  std::vector<Shape2d> shapes;
  constexpr double kGap = 4.0;
  for (int attempt = 0; attempt < 200 && shapes.size() < wanted; ++attempt) {
    const double w = std::round(rng.uniform(cfg.min_object, cfg.max_object));
    const double h = std::round(rng.uniform(cfg.min_object, cfg.max_object));
    const double x0 = std::floor(rng.uniform(0, n - w + 1)), y0 = std::floor(rng.uniform(0, n - h + 1));
    const Box box{x0, y0, x0 + w, y0 + h};
    const auto kind = static_cast<ShapeKind>(rng.below(3));
    const bool clear = std::all_of(shapes.begin(), shapes.end(), [&](const Shape2d& s) {
      return box.x_min >= s.box.x_max + kGap || s.box.x_min >= box.x_max + kGap || box.y_min >= s.box.y_max + kGap ||
             s.box.y_min >= box.y_max + kGap;
    });
    if (!clear) continue;
    Rgb colour = kPalette[order[shapes.size()]];
    for (auto& c : colour) c = std::clamp(c + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    shapes.push_back({box, kind, colour});
  }
  // The first shape is always placeable on an empty canvas.
  const std::size_t target = rng.below(shapes.size());

  GeoSample sample;
  sample.sample_id = synthetic_id(index);
  sample.reference = render_reference(cfg, rng, shapes);
  sample.gt_box = shapes[target].box;

  // Query: a jittered square window around the target, resampled, maybe mirrored.
  const Box& tb = sample.gt_box;
  const double big = std::max(tb.width(), tb.height());
  const double side = big * rng.uniform(cfg.min_window_scale, cfg.max_window_scale);
  const double cx = tb.center_x() + side * rng.uniform(-cfg.max_center_jitter, cfg.max_center_jitter);
  const double cy = tb.center_y() + side * rng.uniform(-cfg.max_center_jitter, cfg.max_center_jitter);
  const double wx0 = cx - side / 2, wy0 = cy - side / 2;
  const bool flip = rng.chance(cfg.flip_probability);
  const double gain = rng.uniform(0.9, 1.1);
  const std::size_t q = cfg.query_size;
  const double step = side / static_cast<double>(q);
  sample.query = Image(3, q, q);
  for (std::size_t y = 0; y < q; ++y) {
    for (std::size_t x = 0; x < q; ++x) {
      const std::size_t sx = flip ? q - 1 - x : x;
      const double rx = wx0 + (static_cast<double>(sx) + 0.5) * step - 0.5;
      const double ry = wy0 + (static_cast<double>(y) + 0.5) * step - 0.5;
      for (std::size_t c = 0; c < 3; ++c) {
        sample.query.at(c, y, x) = to_byte(gain * bilinear(sample.reference, c, ry, rx) + rng.uniform(-0.03, 0.03));
      }
    }
  }

  // Click: target centre displaced uniformly within a disk, mapped into the query.
  const double radius = cfg.click_noise * big * std::sqrt(rng.uniform());
  const double theta = rng.uniform(0, 2 * std::numbers::pi);
  const double click_rx = tb.center_x() + radius * std::cos(theta);
  const double click_ry = tb.center_y() + radius * std::sin(theta);
  double col = (click_rx - wx0) / step;
  const double row = (click_ry - wy0) / step;
  if (flip) col = static_cast<double>(q) - col;
  const double hi = std::nextafter(static_cast<double>(q), 0.0);
  sample.click = {std::clamp(row, 0.0, hi), std::clamp(col, 0.0, hi)};
  if (view) *view = {wx0, wy0, side, flip};
  return sample;
}

std::vector<GeoSample> generate_dataset(const SynthConfig& cfg, std::uint64_t seed, std::size_t count,
                                        std::size_t first_index) {
  std::vector<GeoSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(cfg, seed, first_index + i));
  return out;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("write_pnm: " + std::to_string(image.channels) + " channels unsupported");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  // Planar storage to interleaved file layout.
  std::vector<char> row(image.width * image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) row[x * image.channels + c] = static_cast<char>(image.at(c, y, x));
    }
    os.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (!is || (magic != "P6" && magic != "P5") || maxval != 255 || w == 0 || h == 0) {
    throw std::runtime_error("image " + path.string() + ": not an 8-bit binary PPM/PGM");
  }
  is.get();  // single whitespace before the raster
  Image img(magic == "P6" ? 3 : 1, h, w);
  std::vector<char> row(w * img.channels);
  for (std::size_t y = 0; y < h; ++y) {
    is.read(row.data(), static_cast<std::streamsize>(row.size()));
    if (!is) throw std::runtime_error("image " + path.string() + ": truncated raster");
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) img.at(c, y, x) = static_cast<std::uint8_t>(row[x * img.channels + c]);
    }
  }
  return img;
}

void write_heatmap_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                       const std::vector<double>& values, HeatmapScale scale) {
  if (values.size() != h * w) throw std::invalid_argument("write_heatmap_pgm: value count does not match size");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("write_heatmap_pgm: non-finite value");
  }
  double lo = 0.0, range = 1.0;
  if (scale == HeatmapScale::kMinMax && !values.empty()) {
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    lo = *mn;
    range = *mx - *mn;
  }
  Image img(1, h, w);
  for (std::size_t i = 0; i < values.size(); ++i) img.pixels[i] = range > 0 ? to_byte((values[i] - lo) / range) : 0;
  write_pnm(path, img);
}

namespace {

const std::array<const char*, 9> kAnnotationKeys{"sample_id", "query_path", "reference_path", "click_x", "click_y",
                                                 "box_x_min", "box_y_min", "box_x_max", "box_y_max"};

}  // namespace

std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open annotations " + path.string());
  std::vector<Annotation> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + "invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(where + "expected a JSON object");
    for (const char* key : kAnnotationKeys) {
      if (!j.contains(key)) throw std::runtime_error(where + "missing field '" + key + "'");
    }
    for (const auto& [key, _] : j.items()) {
      if (std::find(kAnnotationKeys.begin(), kAnnotationKeys.end(), key) == kAnnotationKeys.end()) {
        throw std::runtime_error(where + "unknown field '" + key + "'");
      }
    }
    Annotation a;
    try {
      a.sample_id = j.at("sample_id").get<std::string>();
      a.query_path = j.at("query_path").get<std::string>();
      a.reference_path = j.at("reference_path").get<std::string>();
      a.click_x = j.at("click_x").get<double>();
      a.click_y = j.at("click_y").get<double>();
      a.box = {j.at("box_x_min").get<double>(), j.at("box_y_min").get<double>(), j.at("box_x_max").get<double>(),
               j.at("box_y_max").get<double>()};
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + "wrong field type: " + e.what());
    }
    if (!a.box.valid()) throw std::runtime_error(where + "box must have x_min < x_max and y_min < y_max");
    rows.push_back(std::move(a));
  }
  return rows;
}

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& a : rows) {
    nlohmann::ordered_json j;
    j["sample_id"] = a.sample_id;
    j["query_path"] = a.query_path;
    j["reference_path"] = a.reference_path;
    j["click_x"] = a.click_x;
    j["click_y"] = a.click_y;
    j["box_x_min"] = a.box.x_min;
    j["box_y_min"] = a.box.y_min;
    j["box_x_max"] = a.box.x_max;
    j["box_y_max"] = a.box.y_max;
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<GeoSample> load_dataset(const std::filesystem::path& annotations) {
  const auto rows = read_annotations(annotations);
  const auto dir = annotations.parent_path();
  std::vector<GeoSample> samples;
  samples.reserve(rows.size());
  for (const auto& a : rows) {
    GeoSample s;
    s.sample_id = a.sample_id;
    try {
      s.query = read_pnm(dir / a.query_path);
      s.reference = read_pnm(dir / a.reference_path);
    } catch (const std::exception& e) {
      throw std::runtime_error("sample " + a.sample_id + ": " + e.what());
    }
    if (s.query.channels != 3 || s.reference.channels != 3) {
      throw std::runtime_error("sample " + a.sample_id + ": images must be RGB");
    }
    if (a.click_x < 0 || a.click_x >= static_cast<double>(s.query.width) || a.click_y < 0 ||
        a.click_y >= static_cast<double>(s.query.height)) {
      throw std::runtime_error("sample " + a.sample_id + ": click lies outside the query image");
    }
    if (a.box.x_min < 0 || a.box.y_min < 0 || a.box.x_max > static_cast<double>(s.reference.width) ||
        a.box.y_max > static_cast<double>(s.reference.height)) {
      throw std::runtime_error("sample " + a.sample_id + ": box lies outside the reference image");
    }
    s.click = {a.click_y, a.click_x};
    s.gt_box = a.box;
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<GeoSample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::vector<Annotation> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) {
    Annotation a;
    a.sample_id = s.sample_id;
    a.query_path = "images/" + s.sample_id + "_query.ppm";
    a.reference_path = "images/" + s.sample_id + "_reference.ppm";
    a.click_x = s.click.col;
    a.click_y = s.click.row;
    a.box = s.gt_box;
    write_pnm(dir / a.query_path, s.query);
    write_pnm(dir / a.reference_path, s.reference);
    rows.push_back(std::move(a));
  }
  write_annotations(dir / "annotations.jsonl", rows);
}

}  // namespace afgeo
