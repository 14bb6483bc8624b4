#pragma once

// Interference-reducing preprocessors for task vectors.
//
// TIES: keep the top-k magnitudes of each (weighted) delta, elect a sign per
// element by total mass, and average only the contributions that agree with
// it. DARE: drop each element with probability p and rescale survivors by
// 1/(1-p), which leaves the delta unchanged in expectation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "patchkit/rng.hpp"
#include "patchkit/stream.hpp"
#include "patchkit/task_vector.hpp"

namespace patchkit {

inline constexpr double kDefaultTiesDensity = 0.2;
inline constexpr double kDefaultDareDrop = 0.9;

struct TiesConfig {
  double density = kDefaultTiesDensity;
  // Sign election is by total mass; that is the only mode.

  void validate() const {
    if (!(density > 0.0 && density <= 1.0)) {
      throw validation_error("InvalidDensity", "TIES density must be in (0, 1], got " + std::to_string(density));
    }
  }
  bool operator==(const TiesConfig&) const = default;
};

struct DareConfig {
  double drop_p = kDefaultDareDrop;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) {
      throw validation_error("InvalidDropRate", "DARE drop_p must be in [0, 1), got " + std::to_string(drop_p));
    }
  }
  bool operator==(const DareConfig&) const = default;
};

// k = ceil(density * n). A product within 1e-9 (relative) of an integer is
// taken as that integer so 0.7 * 10 keeps 7, not 8.
inline std::size_t trim_count(std::size_t n, double density) {
  const double exact = density * static_cast<double>(n);
  const double nearest = std::round(exact);
  if (std::fabs(exact - nearest) <= 1e-9 * std::max(1.0, exact)) return static_cast<std::size_t>(nearest);
  return std::min(n, static_cast<std::size_t>(std::ceil(exact)));
}

// Keeps the trim_count(n, density) largest-magnitude elements and zeroes the
// rest. Among equal magnitudes at the threshold, lower indices are kept.
inline void ties_trim_inplace(std::span<float> values, double density) {
  TiesConfig{density}.validate();
  const std::size_t n = values.size();
  const std::size_t keep = trim_count(n, density);
  if (keep >= n) return;
  if (keep == 0) {
    std::fill(values.begin(), values.end(), 0.0f);
    return;
  }

  std::vector<float> magnitudes(n);
  std::transform(values.begin(), values.end(), magnitudes.begin(), [](float v) { return std::fabs(v); });
  std::nth_element(magnitudes.begin(), magnitudes.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                   magnitudes.end(), std::greater<>());
  const float threshold = magnitudes[keep - 1];
  magnitudes = {};

  std::size_t above = 0;
  for (float v : values) above += std::fabs(v) > threshold;
  std::size_t ties_left = keep - above;
  for (auto& v : values) {
    const float m = std::fabs(v);
    if (m > threshold) continue;
    if (m == threshold && ties_left > 0) {
      --ties_left;
      continue;
    }
    v = 0.0f;
  }
}

// Sign election and disjoint mean over already-trimmed deltas of equal size.
inline std::vector<float> ties_elect_mean(std::span<const std::vector<float>> trimmed) {
  if (trimmed.empty()) throw validation_error("EmptyMerge", "TIES needs at least one vector");
  const std::size_t n = trimmed.front().size();
  for (const auto& v : trimmed) {
    if (v.size() != n) throw validation_error("ShapeMismatch", "TIES inputs differ in size");
  }
  std::vector<float> out(n, 0.0f);
  for (std::size_t j = 0; j < n; ++j) {
    double mass = 0.0;
    for (const auto& v : trimmed) mass += v[j];
    if (mass == 0.0) continue;
    const bool positive = mass > 0.0;
    double sum = 0.0;
    std::size_t agreeing = 0;
    for (const auto& v : trimmed) {
      if (v[j] != 0.0f && (v[j] > 0.0f) == positive) {
        sum += v[j];
        ++agreeing;
      }
    }
    out[j] = static_cast<float>(sum / static_cast<double>(agreeing));
  }
  return out;
}

// Drop-and-rescale keyed by (seed, tensor name, flat index).
inline void dare_inplace(std::span<float> values, const DareConfig& config, std::string_view tensor_name) {
  config.validate();
  if (config.drop_p == 0.0) return;
  const CounterRng rng(config.seed, tensor_name);
  const double scale = 1.0 / (1.0 - config.drop_p);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (rng.uniform(i) < config.drop_p) {
      values[i] = 0.0f;
    } else {
      values[i] = static_cast<float>(static_cast<double>(values[i]) * scale);
    }
  }
}

// ---------------------------------------------------------------------------
// Whole-vector operations. Each streams one tensor at a time into a new
// task-vector container.

namespace detail {

inline Metadata derived_vector_metadata(const TaskVector& source) {
  return {{std::string(kRoleKey), std::string(kRoleTaskVector)},
          {std::string(kMinuendKey), source.minuend_id()},
          {std::string(kSubtrahendKey), source.subtrahend_id()}};
}

inline std::vector<TensorSpec> f32_layout(const TaskVector& vector, const std::vector<std::string>& names) {
  std::vector<TensorSpec> layout;
  layout.reserve(names.size());
  for (const auto& name : names) layout.push_back({name, DType::F32, *vector.shape_of(name)});
  return layout;
}

// Shortest decimal that reads back as the same double.
inline std::string format_real(double value) {
  std::string text;
  for (int precision = 1; precision <= 17; ++precision) {
    std::ostringstream out;
    out.precision(precision);
    out << value;
    text = out.str();
    if (std::stod(text) == value) break;
  }
  return text;
}

}  // namespace detail

inline TaskVector ties_trim(const TaskVector& vector, double density, const std::filesystem::path& out,
                            const WriteOptions& options = {}) {
  TiesConfig{density}.validate();
  const auto names = vector.names();
  auto metadata = detail::derived_vector_metadata(vector);
  metadata["ties_density"] = detail::format_real(density);
  auto manifest = stream_checkpoint(out, detail::f32_layout(vector, names), metadata, options, [&](std::size_t i) {
    OutputTensor tensor;
    tensor.values = vector.read(names[i]);
    ties_trim_inplace(tensor.values, density);
    return tensor;
  });
  return TaskVector(std::move(manifest));
}

// Sorts vectors by id so the result does not depend on argument order.
inline std::vector<const WeightedVector*> canonical_order(std::span<const WeightedVector> vectors) {
  std::vector<const WeightedVector*> order;
  for (const auto& v : vectors) order.push_back(&v);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    const auto ia = a->vector.id();
    const auto ib = b->vector.id();
    return ia != ib ? ia < ib : a->omega < b->omega;
  });
  return order;
}

// TIES over a whole tensor: scale each delta by its weight, trim, elect, and
// take the disjoint mean.
inline std::vector<float> ties_merge_tensor(std::vector<std::vector<float>> scaled, double density) {
  for (auto& v : scaled) ties_trim_inplace(v, density);
  return ties_elect_mean(scaled);
}

inline TaskVector ties_merge(std::span<const WeightedVector> vectors, double density,
                             const std::filesystem::path& out, const WriteOptions& options = {}) {
  TiesConfig{density}.validate();
  if (vectors.empty()) throw validation_error("EmptyMerge", "TIES needs at least one vector");
  const auto order = canonical_order(vectors);
  const auto& first = order.front()->vector;
  const auto names = first.names();
  for (const auto* v : order) {
    check_omega(v->omega);
    if (v->vector.names() != names) {
      throw validation_error("Incompatible", v->vector.id() + " does not cover the same tensors as " + first.id());
    }
    for (const auto& name : names) {
      if (*v->vector.shape_of(name) != *first.shape_of(name)) {
        throw validation_error("Incompatible", "shape mismatch on '" + name + "' in " + v->vector.id());
      }
    }
  }
  Metadata metadata{{std::string(kRoleKey), std::string(kRoleTaskVector)},
                    {"ties_density", detail::format_real(density)}};
  std::string ids;
  for (const auto* v : order) ids += (ids.empty() ? "" : ",") + v->vector.id();
  metadata[std::string(kMinuendKey)] = ids;
  metadata[std::string(kSubtrahendKey)] = first.subtrahend_id();

  auto manifest = stream_checkpoint(out, detail::f32_layout(first, names), metadata, options, [&](std::size_t i) {
    std::vector<std::vector<float>> scaled;
    for (const auto* v : order) {
      auto delta = v->vector.read(names[i]);
      const auto w = static_cast<float>(v->omega);
      for (auto& x : delta) x = w * x;
      scaled.push_back(std::move(delta));
    }
    OutputTensor tensor;
    tensor.values = ties_merge_tensor(std::move(scaled), density);
    return tensor;
  });
  return TaskVector(std::move(manifest));
}

inline TaskVector dare(const TaskVector& vector, const DareConfig& config, const std::filesystem::path& out,
                       const WriteOptions& options = {}) {
  config.validate();
  const auto names = vector.names();
  auto metadata = detail::derived_vector_metadata(vector);
  metadata["dare_drop_p"] = detail::format_real(config.drop_p);
  metadata["dare_seed"] = std::to_string(config.seed);
  auto manifest = stream_checkpoint(out, detail::f32_layout(vector, names), metadata, options, [&](std::size_t i) {
    OutputTensor tensor;
    tensor.values = vector.read(names[i]);
    dare_inplace(tensor.values, config, names[i]);
    return tensor;
  });
  return TaskVector(std::move(manifest));
}

}  // namespace patchkit
