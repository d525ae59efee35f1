#include "afgeo/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace afgeo {
namespace {

constexpr char kMagic[] = "AFGEO1";
constexpr std::size_t kMagicLen = 6;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void write_le(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const std::string& what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw std::runtime_error("checkpoint: truncated while reading " + what);
  return v;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter<T>> params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, kMagicLen);
  for (const auto& p : params) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto extent : shape) write_le<std::uint64_t>(os, extent);
    for (auto v : p.tensor.values()) write_le<float>(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter<T>> params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[kMagicLen];
  is.read(magic, kMagicLen);
  if (!is || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  // Decode everything first so a mismatch leaves the parameters untouched.
  std::vector<std::vector<T>> staged;
  for (const auto& p : params) {
    const auto name_len = read_le<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    if (name != p.name) throw std::runtime_error("checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
    const auto rank = read_le<std::uint32_t>(is, "rank of " + name);
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::size_t>(read_le<std::uint64_t>(is, "extent of " + name));
    if (shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                               shape_str(p.tensor.shape()));
    }
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<T>(read_le<float>(is, "values of " + name));
    staged.push_back(std::move(values));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint: " + path.string() + " holds more parameters than the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_values();
    std::copy(staged[i].begin(), staged[i].end(), dst.begin());
  }
}

template void save_checkpoint<float>(const std::filesystem::path&, std::span<const Parameter<float>>);
template void save_checkpoint<double>(const std::filesystem::path&, std::span<const Parameter<double>>);
template void load_checkpoint<float>(const std::filesystem::path&, std::span<Parameter<float>>);
template void load_checkpoint<double>(const std::filesystem::path&, std::span<Parameter<double>>);

}  // namespace afgeo
