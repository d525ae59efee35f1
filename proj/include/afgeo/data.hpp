#pragma once

// Synthetic query/reference pairs, image files and JSONL annotations.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afgeo/sample.hpp"

namespace afgeo {

struct SynthConfig {
  std::size_t query_size = 64;
  std::size_t reference_size = 128;
  std::size_t min_shapes = 3, max_shapes = 6;
  double min_object = 16, max_object = 40;  // shape side range, reference pixels
  /// Query window side as a multiple of the target's larger side.
  double min_window_scale = 1.6, max_window_scale = 2.4;
  /// Largest shift of the window centre from the target centre, as a fraction of the window.
  double max_center_jitter = 0.15;
  /// Largest click displacement as a fraction of the target's larger side.
  double click_noise = 0.1;
  double flip_probability = 0.5;

  void validate() const;
};

/// Where the query was cut from: a square window of side `side` with top-left
/// corner (x0, y0) in reference pixels, resampled to the query size, mirrored
/// left-right when `flipped`.
struct QueryView {
  double x0 = 0, y0 = 0, side = 0;
  bool flipped = false;
};

/// Deterministic in (seed, index) alone.
GeoSample generate_sample(const SynthConfig& cfg, std::uint64_t seed, std::size_t index, QueryView* view = nullptr);
std::vector<GeoSample> generate_dataset(const SynthConfig& cfg, std::uint64_t seed, std::size_t count,
                                        std::size_t first_index = 0);
std::string synthetic_id(std::size_t index);

// Binary PPM (3 channels) and PGM (1 channel), 8 bits per sample.
void write_pnm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);
enum class HeatmapScale {
  /// Fixed linear scale: 0 -> 0, 1.0 -> 255, clamped (for maps already in [0,1]).
  kUnit,
  /// Linear from the map's minimum (0) to its maximum (255); a constant map is all 0.
  kMinMax,
};

/// Writes `values` (H*W) as an 8-bit PGM.
void write_heatmap_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                       const std::vector<double>& values, HeatmapScale scale = HeatmapScale::kUnit);

/// One line of annotations.jsonl. Image paths are relative to the file's directory.
struct Annotation {
  std::string sample_id;
  std::string query_path;
  std::string reference_path;
  double click_x = 0, click_y = 0;
  Box box;
};

std::vector<Annotation> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& rows);

/// Loads annotations and their images; errors name the line or the sample.
std::vector<GeoSample> load_dataset(const std::filesystem::path& annotations);
/// Writes images under dir/images and dir/annotations.jsonl.
void save_dataset(const std::filesystem::path& dir, const std::vector<GeoSample>& samples);

}  // namespace afgeo
