#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string_view>

#include "patchkit/error.hpp"

namespace patchkit {

static_assert(std::endian::native == std::endian::little,
              "the container format is little-endian; big-endian hosts are unsupported");

enum class DType : std::uint8_t { F32, F16, BF16, I64, BOOL };

constexpr std::size_t byte_width(DType dtype) noexcept {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::I64: return 8;
    case DType::BOOL: return 1;
  }
  return 0;
}

// Only floating dtypes take part in merge arithmetic; the rest are copied.
constexpr bool is_arithmetic(DType dtype) noexcept {
  return dtype == DType::F32 || dtype == DType::F16 || dtype == DType::BF16;
}

constexpr std::string_view dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::I64: return "I64";
    case DType::BOOL: return "BOOL";
  }
  return "?";
}

constexpr std::optional<DType> parse_dtype(std::string_view tag) noexcept {
  if (tag == "F32") return DType::F32;
  if (tag == "F16") return DType::F16;
  if (tag == "BF16") return DType::BF16;
  if (tag == "I64") return DType::I64;
  if (tag == "BOOL") return DType::BOOL;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scalar conversions. Narrowing rounds to nearest, ties to even; NaNs stay NaN
// (quieted), overflow goes to infinity.

constexpr float bf16_to_f32(std::uint16_t bits) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

constexpr std::uint16_t f32_to_bf16(float value) noexcept {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  if ((bits & 0x7FFFFFFFu) > 0x7F800000u) {
    return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
  }
  const std::uint32_t rounding = 0x7FFFu + ((bits >> 16) & 1u);
  return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

constexpr float f16_to_f32(std::uint16_t half) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(half & 0x8000u) << 16;
  const std::uint32_t exponent = (half >> 10) & 0x1Fu;
  const std::uint32_t mantissa = half & 0x3FFu;
  if (exponent == 0x1F) {
    return std::bit_cast<float>(sign | 0x7F800000u | (mantissa << 13));
  }
  if (exponent == 0) {
    // zero or subnormal: mantissa * 2^-24, exact in F32
    const float magnitude = static_cast<float>(mantissa) * 0x1p-24f;
    return sign ? -magnitude : magnitude;
  }
  return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

inline std::uint16_t f32_to_f16(float value) noexcept {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t magnitude = bits & 0x7FFFFFFFu;

  if (magnitude > 0x7F800000u) {
    return static_cast<std::uint16_t>(sign | 0x7E00u | ((magnitude >> 13) & 0x3FFu));
  }
  // 65520 is the midpoint between 65504 and 2^16; it rounds (to even) up.
  if (magnitude >= 0x477FF000u) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (magnitude < 0x38800000u) {
    // below 2^-14: subnormal half, in units of 2^-24. Scaling is exact and
    // nearbyint rounds ties to even. A result of 0x400 is the smallest normal.
    const float units = std::bit_cast<float>(magnitude) * 0x1p24f;
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(std::nearbyint(units)));
  }
  const std::uint32_t exponent = (magnitude >> 23) - 127u + 15u;
  const std::uint32_t mantissa = magnitude & 0x7FFFFFu;
  std::uint32_t half = (exponent << 10) | (mantissa >> 13);
  const std::uint32_t rest = mantissa & 0x1FFFu;
  if (rest > 0x1000u || (rest == 0x1000u && (half & 1u))) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

// ---------------------------------------------------------------------------
// Buffer conversions between stored bytes and F32 working values.

inline void widen(std::span<const std::byte> raw, DType dtype, std::span<float> out) {
  if (!is_arithmetic(dtype)) {
    throw validation_error("NonArithmeticDtype",
                           "cannot widen " + std::string(dtype_name(dtype)) + " to F32");
  }
  if (raw.size() != out.size() * byte_width(dtype)) {
    throw validation_error("SizeMismatch", "byte buffer does not match element count");
  }
  switch (dtype) {
    case DType::F32:
      std::memcpy(out.data(), raw.data(), raw.size());
      return;
    case DType::F16:
    case DType::BF16:
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t bits;
        std::memcpy(&bits, raw.data() + 2 * i, 2);
        out[i] = dtype == DType::F16 ? f16_to_f32(bits) : bf16_to_f32(bits);
      }
      return;
    default:
      return;
  }
}

inline void narrow(std::span<const float> values, DType dtype, std::span<std::byte> out) {
  if (!is_arithmetic(dtype)) {
    throw validation_error("NonArithmeticDtype",
                           "cannot narrow F32 to " + std::string(dtype_name(dtype)));
  }
  if (out.size() != values.size() * byte_width(dtype)) {
    throw validation_error("SizeMismatch", "byte buffer does not match element count");
  }
  switch (dtype) {
    case DType::F32:
      std::memcpy(out.data(), values.data(), out.size());
      return;
    case DType::F16:
    case DType::BF16:
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t bits =
            dtype == DType::F16 ? f32_to_f16(values[i]) : f32_to_bf16(values[i]);
        std::memcpy(out.data() + 2 * i, &bits, 2);
      }
      return;
    default:
      return;
  }
}

}  // namespace patchkit
