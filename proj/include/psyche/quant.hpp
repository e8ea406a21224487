// SPDX-License-Identifier: Apache-2.0
//
// Blockwise symmetric absmax 4-bit quantisation.
//
// Each block of `block_size` consecutive row-major weights gets
// scale = absmax / 7 and codes clamp(round(w / scale), -7, 7), rounding half
// away from zero. Codes are packed two per byte (low nibble first, 4-bit two's
// complement). Scales are rounded to f32 before coding, so a serialised and
// reloaded matrix dequantizes to exactly the in-memory values.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/common.hpp"

namespace psyche::models {

inline constexpr char kQuantMagic[4] = {'P', 'S', 'Q', '4'};
inline constexpr std::int8_t kMaxCode = 7;

struct QuantizedLinear {
  ad::Shape shape;
  std::size_t block_size = 32;
  std::vector<std::int8_t> codes;
  std::vector<double> scales;

  std::size_t numel() const { return codes.size(); }
  std::size_t blocks() const { return scales.size(); }

  ad::Tensor dequantize() const {
    ad::Tensor t = ad::Tensor::zeros(shape);
    for (std::size_t i = 0; i < codes.size(); ++i) t.data[i] = codes[i] * scales[i / block_size];
    return t;
  }

  std::vector<std::byte> serialize() const {
    ByteWriter w;
    w.put_bytes(std::string_view(kQuantMagic, 4));
    w.put(std::uint32_t{1});
    w.put(static_cast<std::uint32_t>(block_size));
    w.put(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.put(static_cast<std::uint64_t>(d));
    for (std::size_t i = 0; i < codes.size(); i += 2) {
      auto lo = static_cast<std::uint8_t>(codes[i] & 0x0f);
      auto hi = static_cast<std::uint8_t>(i + 1 < codes.size() ? (codes[i + 1] & 0x0f) : 0);
      w.put(static_cast<std::uint8_t>(lo | (hi << 4)));
    }
    for (double s : scales) w.put(static_cast<float>(s));
    return std::move(w.bytes());
  }

  static QuantizedLinear deserialize(std::span<const std::byte> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kQuantMagic, 4) != 0)
      throw FormatError("quantized blob: bad magic");
    ByteReader r(bytes.subspan(4));
    if (r.get<std::uint32_t>() != 1) throw FormatError("quantized blob: unsupported version");
    QuantizedLinear q;
    q.block_size = r.get<std::uint32_t>();
    if (q.block_size == 0) throw FormatError("quantized blob: zero block size");
    auto ndims = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < ndims; ++i) q.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const std::size_t n = ad::shape_numel(q.shape);
    q.codes.resize(n);
    for (std::size_t i = 0; i < n; i += 2) {
      auto byte = r.get<std::uint8_t>();
      auto decode = [](std::uint8_t nib) { return static_cast<std::int8_t>(nib >= 8 ? nib - 16 : nib); };
      q.codes[i] = decode(byte & 0x0f);
      if (i + 1 < n) q.codes[i + 1] = decode(byte >> 4);
    }
    const std::size_t nb = (n + q.block_size - 1) / q.block_size;
    for (std::size_t b = 0; b < nb; ++b) q.scales.push_back(static_cast<double>(r.get<float>()));
    if (r.remaining() != 0) throw FormatError("quantized blob: trailing bytes");
    return q;
  }
};

inline QuantizedLinear quantize_weights(const ad::Tensor& W, std::size_t block_size = 32) {
  if (block_size == 0) throw ConfigError("quantize: block size must be >= 1");
  QuantizedLinear q;
  q.shape = W.shape;
  q.block_size = block_size;
  const std::size_t n = W.numel();
  q.codes.resize(n);
  for (std::size_t start = 0; start < n; start += block_size) {
    const std::size_t end = std::min(n, start + block_size);
    double absmax = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      if (!std::isfinite(W.data[i])) throw ValidationError("quantize: non-finite weight");
      absmax = std::max(absmax, std::abs(W.data[i]));
    }
    const float rounded = static_cast<float>(absmax / kMaxCode);
    if (!std::isfinite(rounded)) throw ValidationError("quantize: weight magnitude exceeds the f32 scale range");
    const double scale = static_cast<double>(rounded);
    q.scales.push_back(scale);
    for (std::size_t i = start; i < end; ++i) {
      double c = scale > 0.0 ? std::round(W.data[i] / scale) : 0.0;
      q.codes[i] = static_cast<std::int8_t>(std::clamp(c, -double{kMaxCode}, double{kMaxCode}));
    }
  }
  return q;
}

}  // namespace psyche::models
