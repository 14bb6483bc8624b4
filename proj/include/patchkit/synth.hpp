#pragma once

// Deterministic synthetic checkpoints for tests and the invariant runner.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "patchkit/checkpoint.hpp"
#include "patchkit/rng.hpp"

namespace patchkit {

struct Uniform {};   // on [-1, 1), multiples of 2^-23
struct Gaussian {};  // N(0, 1), Box-Muller
struct Constant {
  float value = 0.0f;
};
using Distribution = std::variant<Uniform, Gaussian, Constant>;

struct SynthSpec {
  std::uint64_t seed = 0;
  std::vector<TensorSpec> layout;
  Distribution distribution = Uniform{};
  Metadata metadata = {{std::string(kRoleKey), std::string(kRoleModel)}};
};

// Element `index` of tensor `name` as an F32 working value.
inline float synth_value(const Distribution& distribution, const CounterRng& rng, std::uint64_t index) {
  if (const auto* c = std::get_if<Constant>(&distribution)) return c->value;
  if (std::holds_alternative<Uniform>(distribution)) {
    // 24 random bits k: (k - 2^23) * 2^-23. Every value is exact in F32 and
    // sums/differences of two such values stay exact.
    const auto k = static_cast<std::int64_t>(rng.bits(index) >> 40);
    return static_cast<float>(k - (1 << 23)) * 0x1p-23f;
  }
  const double u1 = (static_cast<double>(rng.bits(2 * index) >> 11) + 1.0) * 0x1p-53;
  const double u2 = rng.uniform(2 * index + 1);
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

// Same spec, same bytes: every element is a pure function of
// (seed, tensor name, flat index).
inline CheckpointManifest gen_checkpoint(const SynthSpec& spec, const std::filesystem::path& path,
                                         WriteMode mode = WriteMode::fail_if_exists) {
  CheckpointWriter writer(path, spec.layout, spec.metadata, mode);
  while (!writer.done()) {
    const auto tensor = writer.next();
    const CounterRng rng(spec.seed, tensor.name);
    const std::uint64_t n = element_count(tensor.shape);
    if (is_arithmetic(tensor.dtype)) {
      std::vector<float> values(n);
      for (std::uint64_t i = 0; i < n; ++i) values[i] = synth_value(spec.distribution, rng, i);
      writer.write_values(values);
      continue;
    }
    std::vector<std::byte> raw(n * byte_width(tensor.dtype));
    for (std::uint64_t i = 0; i < n; ++i) {
      if (tensor.dtype == DType::BOOL) {
        raw[i] = static_cast<std::byte>(rng.bits(i) & 1u);
      } else {
        const auto value = static_cast<std::int64_t>(rng.bits(i) % 50000u);
        std::memcpy(raw.data() + 8 * i, &value, 8);
      }
    }
    writer.write_raw(raw);
  }
  return writer.commit();
}

// ---------------------------------------------------------------------------
// ULP measures

// Distance in representable F32 values; 0 iff bitwise equal (and +0 == -0).
inline std::uint64_t ulp_distance(float a, float b) {
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<std::uint64_t>::max();
  auto ordered = [](float x) -> std::int64_t {
    const auto bits = static_cast<std::int64_t>(std::bit_cast<std::uint32_t>(x));
    return bits & 0x80000000 ? 0x80000000 - bits : bits;
  };
  const auto d = ordered(a) - ordered(b);
  return static_cast<std::uint64_t>(d < 0 ? -d : d);
}

// Spacing of F32 values at magnitude |x| (the smallest subnormal near zero).
inline double ulp_at(double x) {
  const float f = static_cast<float>(std::fabs(x));
  if (!std::isfinite(f)) return std::numeric_limits<double>::infinity();
  const float next = std::nextafter(f, std::numeric_limits<float>::infinity());
  return static_cast<double>(next) - static_cast<double>(f);
}

// |a - b| in units of the F32 spacing at `scale`.
inline double ulps_at_scale(double a, double b, double scale) { return std::fabs(a - b) / ulp_at(scale); }

}  // namespace patchkit
