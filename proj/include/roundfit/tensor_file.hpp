#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "roundfit/pack.hpp"
#include "roundfit/tensor.hpp"

namespace roundfit {

inline constexpr char kTensorFileMagic[] = "RFTF1";
inline constexpr int kTensorFileVersion = 1;

using TensorEntry = std::variant<Tensor<float>, Tensor<double>, PackedTensor>;

/// Named tensors plus free-form metadata.
///
/// On disk: the 5-byte magic "RFTF1", a u64 little-endian manifest length,
/// the UTF-8 JSON manifest, then the data blob. The manifest holds
/// {"format_version", "meta", "tensors": {name: {dtype, shape, offset, length}}}
/// with offsets relative to the blob start; entries are contiguous and
/// cover the blob exactly. dtype is "f32", "f64" (raw little-endian) or
/// "packed" (a serialized PackedTensor). Unknown manifest fields are ignored.
struct TensorFile {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, TensorEntry>> tensors;

  const TensorEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes);

void save_tensors(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensors(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace roundfit
