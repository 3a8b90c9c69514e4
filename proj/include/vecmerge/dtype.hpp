// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace vecmerge {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

/// Element types an archive may hold. Integer and quantized types are not supported.
enum class DType : std::uint8_t { F64, F32, F16, BF16 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);

// Scalar conversions. Narrowing is round-to-nearest-even with a single
// rounding step from binary64; overflow saturates to infinity.
std::uint16_t to_bf16_bits(double value);
std::uint16_t to_f16_bits(double value);
double bf16_bits_to_double(std::uint16_t bits);
double f16_bits_to_double(std::uint16_t bits);

/// Decodes `out.size()` elements of `dtype` from little-endian `bytes`.
void decode_f64(DType dtype, std::span<const std::byte> bytes, std::span<double> out);

/// Encodes `values` into `out` (sized `values.size() * dtype_size(dtype)`).
void encode_f64(DType dtype, std::span<const double> values, std::span<std::byte> out);

/// Reads element `index` of a `dtype` buffer as binary64.
double decode_one(DType dtype, std::span<const std::byte> bytes, std::size_t index);

}  // namespace vecmerge
