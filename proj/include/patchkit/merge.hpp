#pragma once

// Weight-space merges over whole checkpoints, one tensor at a time:
//
//   task vector          tau = model - base
//   task arithmetic      out = general + sum_i omega_i * tau_i
//   linear interpolation out = pre + omega * tau_skill + (1 - omega) * tau_general
//   WiSE-FT              out = general + omega * (cft - general)
//
// All arithmetic is F32 (interpolation uses double intermediates); outputs are
// narrowed to the requested dtype. Non-floating tensors are copied from the
// general (or pre) model.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchkit/sparsify.hpp"
#include "patchkit/stream.hpp"
#include "patchkit/task_vector.hpp"

namespace patchkit {

enum class PreprocessorKind { none, ties, dare };

struct Preprocessor {
  PreprocessorKind kind = PreprocessorKind::none;
  TiesConfig ties;
  DareConfig dare;

  bool operator==(const Preprocessor&) const = default;
};

// One skill of a multi-skill merge.
struct Skill {
  WeightedVector weighted;
  Preprocessor preprocessor;
};

struct MergeOptions {
  MissingKeyPolicy missing_keys = MissingKeyPolicy::strict;
  std::optional<DType> output_dtype;  // empty: keep each tensor's input dtype
  bool allow_nonfinite = false;
  WriteOptions write;
  Metadata metadata;  // added to the output header
};

struct TensorStat {
  std::string name;
  double max_abs_delta = 0.0;  // max |out - general| over the tensor
};

struct MergeResult {
  CheckpointManifest manifest;
  std::vector<TensorStat> stats;
  std::vector<std::string> warnings;
};

namespace kernels {

// acc[i] = acc[i] + w * x[i], rounded to F32 at each step.
inline void accumulate(std::span<float> acc, float w, std::span<const float> x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] + w * x[i];
}

// pre + (tau_general + omega * (tau_skill - tau_general)), in double, rounded
// once. Exact at omega = 0 and 1 whenever the deltas are, and reduces to
// pre + tau exactly when both deltas are equal.
inline void interpolate(std::span<const float> pre, std::span<const float> tau_skill,
                        std::span<const float> tau_general, double omega, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = tau_general[i];
    const double mixed = g + omega * (static_cast<double>(tau_skill[i]) - g);
    out[i] = static_cast<float>(static_cast<double>(pre[i]) + mixed);
  }
}

// general + w * (cft - general) with the same F32 rounding steps as
// accumulate(), so it agrees bitwise with task arithmetic whenever the
// recovered delta cft - general is exact.
inline void wise(std::span<const float> general, std::span<const float> cft, double omega, std::span<float> out) {
  const auto w = static_cast<float>(omega);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float delta = cft[i] - general[i];
    out[i] = general[i] + w * delta;
  }
}

inline double max_abs_difference(std::span<const float> a, std::span<const float> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

// Elements that are, or become after narrowing to `dtype`, non-finite.
inline std::size_t nonfinite_after_narrowing(std::span<const float> values, DType dtype) {
  std::size_t count = 0;
  for (float v : values) {
    float stored = v;
    if (dtype == DType::F16) stored = f16_to_f32(f32_to_f16(v));
    if (dtype == DType::BF16) stored = bf16_to_f32(f32_to_bf16(v));
    count += !std::isfinite(stored);
  }
  return count;
}

}  // namespace kernels

namespace detail {

inline void require_finite(std::span<const float> values, const std::string& tensor, const std::string& source,
                           bool allow) {
  if (allow) return;
  if (const auto bad = count_nonfinite(values)) {
    throw numeric_error("NonFiniteInput", std::to_string(bad) + " non-finite elements in tensor '" + tensor +
                                              "' of " + source);
  }
}

inline void require_finite_result(std::span<const float> values, DType dtype, const std::string& tensor,
                                  bool allow) {
  if (allow) return;
  if (const auto bad = kernels::nonfinite_after_narrowing(values, dtype)) {
    throw numeric_error("NonFiniteResult", std::to_string(bad) + " non-finite elements in output tensor '" +
                                               tensor + "' (" + std::string(dtype_name(dtype)) + ")");
  }
}

inline DType output_dtype_for(const TensorRecord& record, const MergeOptions& options) {
  if (!is_arithmetic(record.dtype)) return record.dtype;
  return options.output_dtype.value_or(record.dtype);
}

inline std::vector<TensorSpec> output_layout(const CheckpointManifest& reference, const MergeOptions& options) {
  if (options.output_dtype && !is_arithmetic(*options.output_dtype)) {
    throw validation_error("InvalidOutputDtype", "output dtype must be F32, F16 or BF16");
  }
  std::vector<TensorSpec> layout;
  for (const auto& name : reference.sorted_names()) {
    const auto& record = reference.at(name);
    layout.push_back({name, output_dtype_for(record, options), record.shape});
  }
  return layout;
}

// Checks that `vector` provides a delta for every floating tensor of
// `reference` and nothing else. Under the strict policy a gap is an error;
// otherwise it becomes a warning.
inline void check_coverage(const CheckpointManifest& reference, const TaskVector& vector, MissingKeyPolicy policy,
                           std::vector<std::string>& warnings) {
  CompatReport report = vector.endpoint_report();
  if (!report.compatible()) {
    const std::string message = "endpoints of " + vector.id() + " differ: " + report.summary();
    if (policy == MissingKeyPolicy::strict) throw validation_error("Incompatible", message);
    warnings.push_back(message);
  }
  CompatReport coverage;
  for (const auto& record : reference.records()) {
    if (!is_arithmetic(record.dtype)) continue;
    const auto* shape = vector.shape_of(record.name);
    if (!shape) {
      const bool lazy_shape_issue = !vector.is_stored() && vector.model()->contains(record.name);
      if (!lazy_shape_issue) coverage.only_in_a.push_back(record.name);
    } else if (*shape != record.shape) {
      coverage.shape_mismatches.push_back(record.name);
    }
  }
  for (const auto& name : vector.names()) {
    const auto* record = reference.find(name);
    if (!record || !is_arithmetic(record->dtype)) coverage.only_in_b.push_back(name);
  }
  std::sort(coverage.only_in_a.begin(), coverage.only_in_a.end());
  std::sort(coverage.shape_mismatches.begin(), coverage.shape_mismatches.end());
  if (!coverage.compatible()) {
    const std::string message = reference.path().string() + " vs " + vector.id() + ": " + coverage.summary();
    if (policy == MissingKeyPolicy::strict) throw validation_error("Incompatible", message);
    warnings.push_back(message);
  }
}

inline bool covers(const TaskVector& vector, const TensorRecord& record) {
  const auto* shape = vector.shape_of(record.name);
  return shape && *shape == record.shape;
}

inline Metadata model_metadata(const MergeOptions& options, std::string_view method) {
  Metadata metadata = options.metadata;
  metadata[std::string(kRoleKey)] = std::string(kRoleModel);
  metadata["merge_method"] = std::string(method);
  metadata["missing_key_policy"] = std::string(policy_name(options.missing_keys));
  return metadata;
}

inline OutputTensor pass_through(const CheckpointManifest& source, const TensorRecord& record) {
  OutputTensor tensor;
  tensor.raw = read_raw(source, record);
  return tensor;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline TaskVector compute_task_vector(const CheckpointManifest& model, const CheckpointManifest& base,
                                      const std::filesystem::path& out, const MergeOptions& options = {}) {
  const auto lazy = TaskVector::difference(model, base);
  const auto report = lazy.endpoint_report();
  if (!report.compatible() && options.missing_keys == MissingKeyPolicy::strict) {
    throw validation_error("Incompatible", model.path().string() + " vs " + base.path().string() + ": " +
                                               report.summary());
  }
  // zeros keeps model tensors without a usable base counterpart as zero deltas.
  std::vector<TensorSpec> layout;
  for (const auto& name : model.sorted_names()) {
    const auto& record = model.at(name);
    if (!is_arithmetic(record.dtype)) continue;
    if (!lazy.shape_of(name) && options.missing_keys != MissingKeyPolicy::zeros) continue;
    layout.push_back({name, DType::F32, record.shape});
  }
  Metadata metadata = options.metadata;
  metadata[std::string(kRoleKey)] = std::string(kRoleTaskVector);
  metadata[std::string(kMinuendKey)] = lazy.minuend_id();
  metadata[std::string(kSubtrahendKey)] = lazy.subtrahend_id();

  auto manifest = stream_checkpoint(out, layout, metadata, options.write, [&](std::size_t i) {
    const auto& name = layout[i].name;
    OutputTensor tensor;
    if (!lazy.shape_of(name)) {
      tensor.values.assign(element_count(layout[i].shape), 0.0f);
      return tensor;
    }
    tensor.values = read_values(model, model.at(name));
    detail::require_finite(tensor.values, name, model.path().string(), options.allow_nonfinite);
    const auto base_values = read_values(base, base.at(name));
    detail::require_finite(base_values, name, base.path().string(), options.allow_nonfinite);
    for (std::size_t j = 0; j < tensor.values.size(); ++j) tensor.values[j] = tensor.values[j] - base_values[j];
    return tensor;
  });
  return TaskVector(std::move(manifest));
}

// Skills are accumulated in canonical order (by vector id, then weight), so
// the output does not depend on the order they are listed in. If any skill
// uses TIES, all must, with one density; the TIES-merged delta is then added
// with weight 1 (each input was already scaled by its own weight).
inline MergeResult apply_task_arithmetic(const CheckpointManifest& general, std::span<const Skill> skills,
                                         const std::filesystem::path& out, const MergeOptions& options = {}) {
  std::vector<std::string> warnings;
  std::vector<const Skill*> order;
  for (const auto& skill : skills) order.push_back(&skill);
  std::stable_sort(order.begin(), order.end(), [](const Skill* a, const Skill* b) {
    const auto ia = a->weighted.vector.id();
    const auto ib = b->weighted.vector.id();
    return ia != ib ? ia < ib : a->weighted.omega < b->weighted.omega;
  });

  std::optional<TiesConfig> ties;
  for (const auto* skill : order) {
    if (auto warning = check_omega(skill->weighted.omega)) warnings.push_back(*warning);
    detail::check_coverage(general, skill->weighted.vector, options.missing_keys, warnings);
    const auto& pre = skill->preprocessor;
    if (pre.kind == PreprocessorKind::ties) {
      pre.ties.validate();
      if (ties && !(*ties == pre.ties)) {
        throw validation_error("InconsistentTies", "all TIES skills must share one density");
      }
      ties = pre.ties;
    }
    if (pre.kind == PreprocessorKind::dare) pre.dare.validate();
  }
  if (ties && std::any_of(order.begin(), order.end(),
                          [](const Skill* s) { return s->preprocessor.kind != PreprocessorKind::ties; })) {
    throw validation_error("InconsistentTies", "TIES merges every skill together; set it on all skills or none");
  }

  const auto layout = detail::output_layout(general, options);
  std::vector<TensorStat> stats(layout.size());
  auto produce = [&](std::size_t i) {
    const auto& record = general.at(layout[i].name);
    if (!is_arithmetic(record.dtype)) return detail::pass_through(general, record);

    const auto base = read_values(general, record);
    detail::require_finite(base, record.name, general.path().string(), options.allow_nonfinite);
    OutputTensor tensor;
    tensor.values = base;

    const bool all_cover = std::all_of(order.begin(), order.end(), [&](const Skill* s) {
      return detail::covers(s->weighted.vector, record);
    });
    if (!all_cover && options.missing_keys == MissingKeyPolicy::skip) return tensor;

    auto load = [&](const Skill& skill) {
      auto delta = skill.weighted.vector.read(record.name);
      detail::require_finite(delta, record.name, skill.weighted.vector.id(), options.allow_nonfinite);
      if (skill.preprocessor.kind == PreprocessorKind::dare) {
        dare_inplace(delta, skill.preprocessor.dare, record.name);
      }
      return delta;
    };

    if (ties) {
      std::vector<std::vector<float>> scaled;
      for (const auto* skill : order) {
        if (!detail::covers(skill->weighted.vector, record)) continue;
        auto delta = load(*skill);
        const auto w = static_cast<float>(skill->weighted.omega);
        for (auto& x : delta) x = w * x;
        scaled.push_back(std::move(delta));
      }
      if (!scaled.empty()) {
        const auto merged = ties_merge_tensor(std::move(scaled), ties->density);
        kernels::accumulate(tensor.values, 1.0f, merged);
      }
    } else {
      for (const auto* skill : order) {
        if (!detail::covers(skill->weighted.vector, record)) continue;
        const auto delta = load(*skill);
        kernels::accumulate(tensor.values, static_cast<float>(skill->weighted.omega), delta);
      }
    }
    detail::require_finite_result(tensor.values, layout[i].dtype, record.name, options.allow_nonfinite);
    tensor.max_abs_delta = kernels::max_abs_difference(tensor.values, base);
    return tensor;
  };

  auto metadata = detail::model_metadata(options, "task_arithmetic");
  auto manifest = stream_checkpoint(out, layout, metadata, options.write, produce,
                                    [&](std::size_t i, const OutputTensor& t) {
                                      stats[i] = {layout[i].name, t.max_abs_delta};
                                    });
  return {std::move(manifest), std::move(stats), std::move(warnings)};
}

inline MergeResult apply_task_arithmetic(const CheckpointManifest& general, std::span<const WeightedVector> skills,
                                         const std::filesystem::path& out, const MergeOptions& options = {}) {
  std::vector<Skill> plain;
  plain.reserve(skills.size());
  for (const auto& weighted : skills) plain.push_back({weighted, {}});
  return apply_task_arithmetic(general, std::span<const Skill>(plain), out, options);
}

// Non-floating tensors come from `pre_model`; there is no general model file
// in this method.
inline MergeResult linear_interpolate(const CheckpointManifest& pre_model, const TaskVector& skill,
                                      const TaskVector& general_vec, double omega,
                                      const std::filesystem::path& out, const MergeOptions& options = {}) {
  std::vector<std::string> warnings;
  if (auto warning = check_omega(omega)) warnings.push_back(*warning);
  detail::check_coverage(pre_model, skill, options.missing_keys, warnings);
  detail::check_coverage(pre_model, general_vec, options.missing_keys, warnings);

  const auto layout = detail::output_layout(pre_model, options);
  std::vector<TensorStat> stats(layout.size());
  auto produce = [&](std::size_t i) {
    const auto& record = pre_model.at(layout[i].name);
    if (!is_arithmetic(record.dtype)) return detail::pass_through(pre_model, record);

    OutputTensor tensor;
    const auto pre = read_values(pre_model, record);
    detail::require_finite(pre, record.name, pre_model.path().string(), options.allow_nonfinite);
    const bool has_skill = detail::covers(skill, record);
    const bool has_general = detail::covers(general_vec, record);
    if ((!has_skill || !has_general) && options.missing_keys == MissingKeyPolicy::skip) {
      tensor.values = pre;
      return tensor;
    }
    const std::size_t n = pre.size();
    auto load = [&](const TaskVector& vector, bool present) {
      if (!present) return std::vector<float>(n, 0.0f);
      auto delta = vector.read(record.name);
      detail::require_finite(delta, record.name, vector.id(), options.allow_nonfinite);
      return delta;
    };
    const auto tau_skill = load(skill, has_skill);
    const auto tau_general = load(general_vec, has_general);
    tensor.values.resize(n);
    kernels::interpolate(pre, tau_skill, tau_general, omega, tensor.values);
    detail::require_finite_result(tensor.values, layout[i].dtype, record.name, options.allow_nonfinite);
    for (std::size_t j = 0; j < n; ++j) {
      const double general_value = static_cast<double>(pre[j]) + tau_general[j];
      tensor.max_abs_delta = std::max(tensor.max_abs_delta, std::fabs(tensor.values[j] - general_value));
    }
    return tensor;
  };

  auto metadata = detail::model_metadata(options, "linear_interpolation");
  auto manifest = stream_checkpoint(out, layout, metadata, options.write, produce,
                                    [&](std::size_t i, const OutputTensor& t) {
                                      stats[i] = {layout[i].name, t.max_abs_delta};
                                    });
  return {std::move(manifest), std::move(stats), std::move(warnings)};
}

// Needs no pre-trained checkpoint: only the general model and its
// continued-finetuned variant.
inline MergeResult wise_ft(const CheckpointManifest& general, const CheckpointManifest& cft_model, double omega,
                           const std::filesystem::path& out, const MergeOptions& options = {}) {
  std::vector<std::string> warnings;
  if (auto warning = check_omega(omega)) warnings.push_back(*warning);
  if (cft_model.role() == kRoleTaskVector) {
    throw validation_error("NotAModel", cft_model.path().string() + " is a task vector; WiSE-FT needs a model");
  }
  const auto cft_delta = TaskVector::difference(cft_model, general);
  detail::check_coverage(general, cft_delta, options.missing_keys, warnings);

  const auto layout = detail::output_layout(general, options);
  std::vector<TensorStat> stats(layout.size());
  auto produce = [&](std::size_t i) {
    const auto& record = general.at(layout[i].name);
    if (!is_arithmetic(record.dtype)) return detail::pass_through(general, record);

    OutputTensor tensor;
    const auto base = read_values(general, record);
    detail::require_finite(base, record.name, general.path().string(), options.allow_nonfinite);
    if (!detail::covers(cft_delta, record)) {
      // Both non-strict policies leave the general tensor untouched here.
      tensor.values = base;
      return tensor;
    }
    const auto cft = read_values(cft_model, cft_model.at(record.name));
    detail::require_finite(cft, record.name, cft_model.path().string(), options.allow_nonfinite);
    tensor.values.resize(base.size());
    kernels::wise(base, cft, omega, tensor.values);
    detail::require_finite_result(tensor.values, layout[i].dtype, record.name, options.allow_nonfinite);
    tensor.max_abs_delta = kernels::max_abs_difference(tensor.values, base);
    return tensor;
  };

  auto metadata = detail::model_metadata(options, "wise_ft");
  auto manifest = stream_checkpoint(out, layout, metadata, options.write, produce,
                                    [&](std::size_t i, const OutputTensor& t) {
                                      stats[i] = {layout[i].name, t.max_abs_delta};
                                    });
  return {std::move(manifest), std::move(stats), std::move(warnings)};
}

}  // namespace patchkit
