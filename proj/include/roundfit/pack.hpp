#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "roundfit/quant.hpp"

namespace roundfit {

/// Packs codes into an LSB-first bit stream of `bits` bits per code.
///
/// Code i occupies stream bits [i*bits, (i+1)*bits); stream bit k is bit
/// k%8 of byte k/8. At 4 bits this puts the first code in the low nibble;
/// at 2 bits four codes share a byte from the lowest bits up; at 3 bits
/// eight codes fill three bytes. Trailing pad bits are zero.
std::vector<std::uint8_t> pack_codes(std::span<const Code> codes, int bits);
std::vector<Code> unpack_codes(std::span<const std::uint8_t> bytes, int bits, Index count);

/// Bit-packed quantized weight with its per-group scale / zero-point sidecar.
struct PackedTensor {
  std::string name;
  Shape shape;  // original [out, in]
  QuantConfig config;
  Index n_groups = 0;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;
  std::vector<std::uint16_t> zero_points;

  std::vector<Code> unpack() const;
  Tensor<float> dequantize() const;

  /// Single-line JSON header {name, shape, bits, group_size, n_groups}
  /// terminated by '\n', then [codes][scales f32 LE][zero points u16 LE].
  std::vector<std::uint8_t> serialize() const;
  static PackedTensor deserialize(std::span<const std::uint8_t> bytes);

  bool operator==(const PackedTensor&) const = default;
};

template <typename T>
PackedTensor pack(const QuantizedWeight<T>& q, std::string name);

}  // namespace roundfit
