#pragma once

#include <filesystem>
#include <stdexcept>

#include "mfconv/tensor.hpp"

namespace mfconv {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes `<stem>.f64` (little-endian doubles, row-major) and `<stem>.json`
/// ({"shape":[...],"dtype":"f64"}).
void save_tensor(const Tensor& tensor, const std::filesystem::path& stem);
Tensor load_tensor(const std::filesystem::path& stem);

void write_f64(const std::filesystem::path& file, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& file);

}  // namespace mfconv
