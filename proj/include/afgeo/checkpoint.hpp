#pragma once

// Binary parameter checkpoints.
//
// Layout (all integers little-endian):
//   "AFGEO1"
//   repeated until EOF:
//     u32 name length, UTF-8 name bytes
//     u32 rank, rank x u64 extents
//     numel x f32 values

#include <filesystem>
#include <span>
#include <vector>

#include "afgeo/tensor.hpp"

namespace afgeo {

template <typename T>
void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter<T>> params);

/// Loads into existing parameters; names, order and shapes must match exactly.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter<T>> params);

}  // namespace afgeo
