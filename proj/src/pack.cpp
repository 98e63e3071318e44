#include "roundfit/pack.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

namespace roundfit {

static_assert(std::endian::native == std::endian::little, "raw sections are written in host order");

std::vector<std::uint8_t> pack_codes(std::span<const Code> codes, int bits) {
  QuantConfig{bits, -1}.validate();
  const unsigned limit = 1u << bits;
  std::vector<std::uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const unsigned c = codes[i];
    if (c >= limit) {
      throw EncodingError("code " + std::to_string(c) + " at index " + std::to_string(i) + " does not fit in " +
                          std::to_string(bits) + " bits");
    }
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((c >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  return out;
}

std::vector<Code> unpack_codes(std::span<const std::uint8_t> bytes, int bits, Index count) {
  QuantConfig{bits, -1}.validate();
  const auto n = static_cast<std::size_t>(count);
  if (bytes.size() * 8 < n * static_cast<std::size_t>(bits)) {
    throw FormatError("packed code section holds " + std::to_string(bytes.size()) + " bytes, need " +
                      std::to_string((n * static_cast<std::size_t>(bits) + 7) / 8));
  }
  std::vector<Code> out(n);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    unsigned c = 0;
    for (int b = 0; b < bits; ++b, ++bit) c |= ((bytes[bit / 8] >> (bit % 8)) & 1u) << b;
    out[i] = static_cast<Code>(c);
  }
  return out;
}

std::vector<Code> PackedTensor::unpack() const { return unpack_codes(codes, config.bits, shape_numel(shape)); }

Tensor<float> PackedTensor::dequantize() const {
  const std::vector<Code> q = unpack();
  const Index in = shape.at(1);
  const Index ng = config.groups_per_row(in);
  const Index g = config.effective_group_size(in);
  Buffer<float> w(static_cast<Index>(q.size()));
  for (Index r = 0; r < shape[0]; ++r) {
    for (Index c = 0; c < in; ++c) {
      const auto k = static_cast<std::size_t>(r * ng + c / g);
      const float zp = static_cast<float>(zero_points[k]);
      w(r * in + c) = scales[k] * (static_cast<float>(q[static_cast<std::size_t>(r * in + c)]) - zp);
    }
  }
  return Tensor<float>(shape, std::move(w));
}

std::vector<std::uint8_t> PackedTensor::serialize() const {
  const nlohmann::json header = {{"name", name},
                                 {"shape", shape},
                                 {"bits", config.bits},
                                 {"group_size", config.group_size},
                                 {"n_groups", n_groups}};
  const std::string h = header.dump() + "\n";
  std::vector<std::uint8_t> out(h.begin(), h.end());
  const auto append = [&out](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  append(codes.data(), codes.size());
  append(scales.data(), scales.size() * sizeof(float));
  append(zero_points.data(), zero_points.size() * sizeof(std::uint16_t));
  return out;
}

PackedTensor PackedTensor::deserialize(std::span<const std::uint8_t> bytes) {
  const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
  if (nl == bytes.end()) throw FormatError("packed tensor header is not newline-terminated");
  PackedTensor p;
  try {
    const auto header = nlohmann::json::parse(bytes.begin(), nl);
    p.name = header.at("name").get<std::string>();
    p.shape = header.at("shape").get<Shape>();
    p.config.bits = header.at("bits").get<int>();
    p.config.group_size = header.at("group_size").get<Index>();
    p.n_groups = header.at("n_groups").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("packed tensor header: ") + e.what());
  }
  try {
    p.config.validate();
  } catch (const ArgumentError& e) {
    throw FormatError("packed tensor '" + p.name + "': " + e.what());
  }
  if (p.shape.size() != 2 || p.shape[0] < 0 || p.shape[1] < 0 ||
      p.n_groups != p.shape[0] * p.config.groups_per_row(p.shape[1])) {
    throw FormatError("packed tensor '" + p.name + "': inconsistent shape / group count");
  }
  const auto numel = static_cast<std::size_t>(shape_numel(p.shape));
  const auto groups = static_cast<std::size_t>(p.n_groups);
  const std::size_t code_bytes = (numel * static_cast<std::size_t>(p.config.bits) + 7) / 8;
  const std::size_t body = code_bytes + groups * (sizeof(float) + sizeof(std::uint16_t));
  const std::size_t offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  if (bytes.size() - offset != body) {
    throw FormatError("packed tensor '" + p.name + "': body has " + std::to_string(bytes.size() - offset) +
                      " bytes, expected " + std::to_string(body));
  }
  const std::uint8_t* cursor = bytes.data() + offset;
  p.codes.assign(cursor, cursor + code_bytes);
  cursor += code_bytes;
  p.scales.resize(groups);
  std::memcpy(p.scales.data(), cursor, groups * sizeof(float));
  cursor += groups * sizeof(float);
  p.zero_points.resize(groups);
  std::memcpy(p.zero_points.data(), cursor, groups * sizeof(std::uint16_t));
  return p;
}

template <typename T>
PackedTensor pack(const QuantizedWeight<T>& q, std::string name) {
  PackedTensor p;
  p.name = std::move(name);
  p.shape = q.shape;
  p.config = q.config;
  p.n_groups = static_cast<Index>(q.groups.size());
  p.codes = pack_codes(q.codes, q.config.bits);
  p.scales.reserve(q.groups.size());
  p.zero_points.reserve(q.groups.size());
  for (const auto& g : q.groups) {
    p.scales.push_back(static_cast<float>(g.scale));
    p.zero_points.push_back(static_cast<std::uint16_t>(g.zero_point));
  }
  return p;
}

template PackedTensor pack(const QuantizedWeight<float>&, std::string);
template PackedTensor pack(const QuantizedWeight<double>&, std::string);

}  // namespace roundfit
