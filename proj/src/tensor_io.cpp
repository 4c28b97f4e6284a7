#include "mfconv/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace mfconv {
namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

void write_f64(const std::filesystem::path& file, std::span<const double> values) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + file.string() + " for writing");
  for (double v : values) {
    const auto bits = to_little(std::bit_cast<std::uint64_t>(v));
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    os.write(bytes, 8);
  }
  if (!os) throw FormatError("short write to " + file.string());
}

std::vector<double> read_f64(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cannot open " + file.string());
  is.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(is.tellg());
  if (size % 8 != 0) throw FormatError(file.string() + " is not a whole number of f64 values");
  is.seekg(0);
  std::vector<double> values(size / 8);
  for (auto& v : values) {
    char bytes[8];
    is.read(bytes, 8);
    std::uint64_t bits = 0;
    std::memcpy(&bits, bytes, 8);
    v = std::bit_cast<double>(to_little(bits));
  }
  return values;
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& stem) {
  write_f64(with_suffix(stem, ".f64"), tensor.data());
  nlohmann::json meta{{"shape", tensor.shape()}, {"dtype", "f64"}};
  std::ofstream os(with_suffix(stem, ".json"));
  if (!os) throw FormatError("cannot write sidecar for " + stem.string());
  os << meta.dump() << '\n';
}

Tensor load_tensor(const std::filesystem::path& stem) {
  std::ifstream is(with_suffix(stem, ".json"));
  if (!is) throw FormatError("missing sidecar " + with_suffix(stem, ".json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad sidecar for " + stem.string() + ": " + e.what());
  }
  if (meta.value("dtype", "") != "f64") throw FormatError("unsupported dtype in " + stem.string());
  auto shape = meta.at("shape").get<Shape>();
  auto values = read_f64(with_suffix(stem, ".f64"));
  if (values.size() != shape_numel(shape)) {
    throw FormatError(stem.string() + ": payload has " + std::to_string(values.size()) + " values, shape " +
                      shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)));
  }
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace mfconv
