// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/dtype.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace vecmerge {

namespace {

// Layout of a narrow binary interchange format: 1 sign bit, `exp_bits`
// exponent bits, `man_bits` stored mantissa bits.
struct NarrowFormat {
    int exp_bits;
    int man_bits;

    constexpr int bias() const { return (1 << (exp_bits - 1)) - 1; }
    constexpr std::uint32_t exp_all_ones() const { return (1u << exp_bits) - 1; }
};

constexpr NarrowFormat kBf16{8, 7};
constexpr NarrowFormat kF16{5, 10};

std::uint16_t narrow(double value, NarrowFormat fmt) {
    const auto wide = std::bit_cast<std::uint64_t>(value);
    const std::uint32_t sign = static_cast<std::uint32_t>(wide >> 63) << (fmt.exp_bits + fmt.man_bits);
    const std::uint32_t inf = fmt.exp_all_ones() << fmt.man_bits;
    if (std::isnan(value)) {
        return static_cast<std::uint16_t>(sign | inf | (1u << (fmt.man_bits - 1)));
    }
    const double magnitude = std::fabs(value);
    if (std::isinf(magnitude)) {
        return static_cast<std::uint16_t>(sign | inf);
    }
    if (magnitude == 0.0) {
        return static_cast<std::uint16_t>(sign);
    }

    // Quantum of the target lattice at this magnitude; subnormals share emin.
    const int emin = 1 - fmt.bias();
    const int exponent = std::max(std::ilogb(magnitude), emin);
    const double scaled = std::ldexp(magnitude, fmt.man_bits - exponent);  // exact
    const auto mantissa = static_cast<std::uint64_t>(std::nearbyint(scaled));

    // A mantissa that rounds up to 2^(man_bits+1) carries into the exponent
    // field naturally; the subnormal case has a zero exponent field.
    const std::uint64_t encoded =
        (static_cast<std::uint64_t>(exponent + fmt.bias() - 1) << fmt.man_bits) + mantissa;
    if (encoded >= inf) {
        return static_cast<std::uint16_t>(sign | inf);
    }
    return static_cast<std::uint16_t>(sign | encoded);
}

double widen(std::uint16_t bits, NarrowFormat fmt) {
    const bool negative = (bits >> (fmt.exp_bits + fmt.man_bits)) & 1u;
    const std::uint32_t exponent = (bits >> fmt.man_bits) & fmt.exp_all_ones();
    const std::uint32_t mantissa = bits & ((1u << fmt.man_bits) - 1);
    double magnitude;
    if (exponent == fmt.exp_all_ones()) {
        magnitude = mantissa == 0 ? std::numeric_limits<double>::infinity()
                                  : std::numeric_limits<double>::quiet_NaN();
    } else if (exponent == 0) {
        magnitude = std::ldexp(static_cast<double>(mantissa), 1 - fmt.bias() - fmt.man_bits);
    } else {
        magnitude = std::ldexp(static_cast<double>(mantissa | (1u << fmt.man_bits)),
                               static_cast<int>(exponent) - fmt.bias() - fmt.man_bits);
    }
    return negative ? -magnitude : magnitude;
}

template <typename T>
T load(const std::byte* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store(std::byte* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

}  // namespace

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F64: return 8;
        case DType::F32: return 4;
        case DType::F16:
        case DType::BF16: return 2;
    }
    throw std::logic_error("invalid dtype");
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    throw std::logic_error("invalid dtype");
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F64") return DType::F64;
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

std::uint16_t to_bf16_bits(double value) { return narrow(value, kBf16); }
std::uint16_t to_f16_bits(double value) { return narrow(value, kF16); }
double bf16_bits_to_double(std::uint16_t bits) { return widen(bits, kBf16); }
double f16_bits_to_double(std::uint16_t bits) { return widen(bits, kF16); }

double decode_one(DType dtype, std::span<const std::byte> bytes, std::size_t index) {
    const std::byte* p = bytes.data() + index * dtype_size(dtype);
    switch (dtype) {
        case DType::F64: return load<double>(p);
        case DType::F32: return static_cast<double>(load<float>(p));
        case DType::F16: return f16_bits_to_double(load<std::uint16_t>(p));
        case DType::BF16: return bf16_bits_to_double(load<std::uint16_t>(p));
    }
    throw std::logic_error("invalid dtype");
}

void decode_f64(DType dtype, std::span<const std::byte> bytes, std::span<double> out) {
    if (bytes.size() < out.size() * dtype_size(dtype)) {
        throw std::out_of_range("decode_f64: byte buffer too small");
    }
    switch (dtype) {
        case DType::F64:
            std::memcpy(out.data(), bytes.data(), out.size() * sizeof(double));
            return;
        case DType::F32:
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = static_cast<double>(load<float>(bytes.data() + 4 * i));
            }
            return;
        case DType::F16:
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = f16_bits_to_double(load<std::uint16_t>(bytes.data() + 2 * i));
            }
            return;
        case DType::BF16:
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = bf16_bits_to_double(load<std::uint16_t>(bytes.data() + 2 * i));
            }
            return;
    }
}

void encode_f64(DType dtype, std::span<const double> values, std::span<std::byte> out) {
    if (out.size() < values.size() * dtype_size(dtype)) {
        throw std::out_of_range("encode_f64: byte buffer too small");
    }
    switch (dtype) {
        case DType::F64:
            std::memcpy(out.data(), values.data(), values.size() * sizeof(double));
            return;
        case DType::F32:
            for (std::size_t i = 0; i < values.size(); ++i) {
                store(out.data() + 4 * i, static_cast<float>(values[i]));
            }
            return;
        case DType::F16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                store(out.data() + 2 * i, to_f16_bits(values[i]));
            }
            return;
        case DType::BF16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                store(out.data() + 2 * i, to_bf16_bits(values[i]));
            }
            return;
    }
}

}  // namespace vecmerge
