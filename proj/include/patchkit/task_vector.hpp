#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patchkit/checkpoint.hpp"

namespace patchkit {

inline constexpr std::string_view kMinuendKey = "minuend";
inline constexpr std::string_view kSubtrahendKey = "subtrahend";

enum class MissingKeyPolicy {
  strict,  // any mismatch is an error
  skip,    // tensors not covered by every input are copied from the general model
  zeros,   // an absent delta contributes zero
};

inline std::string_view policy_name(MissingKeyPolicy policy) {
  switch (policy) {
    case MissingKeyPolicy::strict: return "strict";
    case MissingKeyPolicy::skip: return "skip";
    case MissingKeyPolicy::zeros: return "zeros";
  }
  return "?";
}

inline std::optional<MissingKeyPolicy> parse_policy(std::string_view text) {
  if (text == "strict") return MissingKeyPolicy::strict;
  if (text == "skip") return MissingKeyPolicy::skip;
  if (text == "zeros") return MissingKeyPolicy::zeros;
  return std::nullopt;
}

// validate_compat, except that two floating dtypes count as compatible: all
// merge arithmetic happens in F32, so F32 deltas on a BF16 model are fine.
inline CompatReport arithmetic_compat(const CheckpointManifest& a, const CheckpointManifest& b) {
  auto report = validate_compat(a, b);
  std::erase_if(report.dtype_mismatches, [&](const std::string& name) {
    return is_arithmetic(a.at(name).dtype) && is_arithmetic(b.at(name).dtype);
  });
  return report;
}

// A checkpoint-shaped delta (minuend - subtrahend) over the floating tensors.
// Either stored in a container whose role metadata is "task_vector", or
// computed lazily, tensor by tensor, from two model checkpoints.
class TaskVector {
 public:
  explicit TaskVector(CheckpointManifest stored) {
    if (stored.role() != kRoleTaskVector) {
      throw validation_error("NotATaskVector", stored.path().string() + " has role '" + stored.role() +
                                                   "', expected 'task_vector'");
    }
    const auto& meta = stored.metadata();
    auto lookup = [&meta](std::string_view key) {
      auto it = meta.find(std::string(key));
      return it == meta.end() ? std::string() : it->second;
    };
    minuend_id_ = lookup(kMinuendKey);
    subtrahend_id_ = lookup(kSubtrahendKey);
    for (const auto& record : stored.records()) {
      if (!is_arithmetic(record.dtype)) {
        throw validation_error("NotATaskVector", "task vector tensor '" + record.name + "' is not floating point");
      }
    }
    stored_ = std::move(stored);
  }

  static TaskVector open(const std::filesystem::path& path) { return TaskVector(open_checkpoint(path)); }

  static TaskVector difference(CheckpointManifest model, CheckpointManifest base) {
    if (model.role() == kRoleTaskVector || base.role() == kRoleTaskVector) {
      throw validation_error("NotAModel", "task vectors are computed from model checkpoints, not from deltas");
    }
    TaskVector vector;
    vector.minuend_id_ = model.path().string();
    vector.subtrahend_id_ = base.path().string();
    vector.model_ = std::move(model);
    vector.base_ = std::move(base);
    return vector;
  }

  const std::string& minuend_id() const noexcept { return minuend_id_; }
  const std::string& subtrahend_id() const noexcept { return subtrahend_id_; }
  bool is_stored() const noexcept { return stored_.has_value(); }

  // Stable identity used to order accumulation.
  std::string id() const {
    return stored_ ? stored_->path().string() : minuend_id_ + " - " + subtrahend_id_;
  }

  const CheckpointManifest* stored() const noexcept { return stored_ ? &*stored_ : nullptr; }
  const CheckpointManifest* model() const noexcept { return model_ ? &*model_ : nullptr; }
  const CheckpointManifest* base() const noexcept { return base_ ? &*base_ : nullptr; }

  // Shape of the delta named `name`, or nullptr if this vector has none.
  const Shape* shape_of(std::string_view name) const {
    if (stored_) {
      const auto* record = stored_->find(name);
      return record ? &record->shape : nullptr;
    }
    const auto* m = model_->find(name);
    const auto* b = base_->find(name);
    if (!m || !b || !is_arithmetic(m->dtype) || !is_arithmetic(b->dtype) || m->shape != b->shape) return nullptr;
    return &m->shape;
  }

  // Sorted names of every delta tensor.
  std::vector<std::string> names() const {
    if (stored_) return stored_->sorted_names();
    std::vector<std::string> out;
    for (const auto& name : model_->sorted_names()) {
      if (shape_of(name)) out.push_back(name);
    }
    return out;
  }

  // Incompatibilities between the two endpoint models, for the lazy form.
  CompatReport endpoint_report() const {
    if (stored_) return {};
    auto report = arithmetic_compat(*model_, *base_);
    auto non_float = [this](const std::string& name) {
      const auto* record = model_->find(name);
      return record && !is_arithmetic(record->dtype);
    };
    std::erase_if(report.only_in_a, non_float);
    std::erase_if(report.shape_mismatches, non_float);
    std::erase_if(report.dtype_mismatches, non_float);
    std::erase_if(report.only_in_b, [this](const std::string& name) {
      return !is_arithmetic(base_->at(name).dtype);
    });
    return report;
  }

  std::vector<float> read(std::string_view name) const {
    if (stored_) return read_values(*stored_, stored_->at(name));
    if (!shape_of(name)) {
      throw validation_error("UnknownTensor", "no delta '" + std::string(name) + "' between " + minuend_id_ +
                                                  " and " + subtrahend_id_);
    }
    auto delta = read_values(*model_, model_->at(name));
    const auto base = read_values(*base_, base_->at(name));
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = delta[i] - base[i];
    return delta;
  }

 private:
  TaskVector() = default;

  std::optional<CheckpointManifest> stored_;
  std::optional<CheckpointManifest> model_;
  std::optional<CheckpointManifest> base_;
  std::string minuend_id_;
  std::string subtrahend_id_;
};

// A task vector together with its mixture weight.
struct WeightedVector {
  TaskVector vector;
  double omega = 1.0;
};

inline constexpr double kMaxAbsOmega = 2.0;

// Throws on a non-finite or out-of-range weight; returns a warning when the
// weight leaves [0, 1].
inline std::optional<std::string> check_omega(double omega) {
  if (!std::isfinite(omega)) throw validation_error("InvalidOmega", "mixture weight must be finite");
  if (std::fabs(omega) > kMaxAbsOmega) {
    throw validation_error("InvalidOmega", "mixture weight " + std::to_string(omega) + " exceeds |omega| <= 2");
  }
  if (omega < 0.0 || omega > 1.0) {
    return "mixture weight " + std::to_string(omega) + " is outside [0, 1] (extrapolating)";
  }
  return std::nullopt;
}

inline std::size_t count_nonfinite(std::span<const float> values) {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [](float v) { return !std::isfinite(v); }));
}

}  // namespace patchkit
