#pragma once

// Training-step accounting for the three ways of adding a skill:
//
//   CFT  continued finetuning on n subsamples D_i      sum_i steps(D_i)
//   RT   retraining on G + D_i for each subsample      n * steps(G) + sum_i steps(D_i)
//   PTM  one skill run on the full data D, then merge  steps(D)
//
// steps(X) = ceil(X * epochs / batch_size). The full data D is the largest
// subsample.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchkit/error.hpp"

namespace patchkit {

enum class TrainingMethod { cft, rt, ptm };

inline std::string_view training_method_name(TrainingMethod method) {
  switch (method) {
    case TrainingMethod::cft: return "CFT";
    case TrainingMethod::rt: return "RT";
    case TrainingMethod::ptm: return "PTM";
  }
  return "?";
}

inline std::optional<TrainingMethod> parse_training_method(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "cft") return TrainingMethod::cft;
  if (lower == "rt") return TrainingMethod::rt;
  if (lower == "ptm") return TrainingMethod::ptm;
  return std::nullopt;
}

struct CostReport {
  TrainingMethod method = TrainingMethod::ptm;
  std::vector<std::uint64_t> subsample_sizes;
  std::uint64_t general_size = 0;
  std::uint64_t batch_size = 1;
  std::uint64_t epochs = 1;
  std::uint64_t total_steps = 0;

  bool operator==(const CostReport&) const = default;
};

namespace detail {

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  if (b > UINT64_MAX - a) throw numeric_error("Overflow", "step count overflows 64 bits");
  return a + b;
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > UINT64_MAX / a) throw numeric_error("Overflow", "step count overflows 64 bits");
  return a * b;
}

}  // namespace detail

inline std::uint64_t training_steps(std::uint64_t examples, std::uint64_t batch_size, std::uint64_t epochs) {
  if (batch_size == 0) throw validation_error("InvalidBatchSize", "batch size must be at least 1");
  if (epochs == 0) throw validation_error("InvalidEpochs", "epochs must be at least 1");
  const auto seen = detail::checked_mul(examples, epochs);
  return seen / batch_size + (seen % batch_size != 0);
}

// `general_size` is only read for RT and may be 0 otherwise.
inline CostReport cost_steps(TrainingMethod method, std::vector<std::uint64_t> subsample_sizes,
                             std::uint64_t general_size, std::uint64_t batch_size, std::uint64_t epochs) {
  if (subsample_sizes.empty()) throw validation_error("EmptySubsamples", "at least one subsample size is required");
  if (std::find(subsample_sizes.begin(), subsample_sizes.end(), 0u) != subsample_sizes.end()) {
    throw validation_error("InvalidSize", "subsample sizes must be positive");
  }
  if (method == TrainingMethod::rt && general_size == 0) {
    throw validation_error("InvalidSize", "RT needs a positive general dataset size");
  }
  CostReport report{method, std::move(subsample_sizes), general_size, batch_size, epochs, 0};
  const auto& sizes = report.subsample_sizes;
  std::uint64_t skill_steps = 0;
  for (auto size : sizes) skill_steps = detail::checked_add(skill_steps, training_steps(size, batch_size, epochs));
  switch (method) {
    case TrainingMethod::cft:
      report.total_steps = skill_steps;
      break;
    case TrainingMethod::rt:
      report.total_steps = detail::checked_add(
          detail::checked_mul(sizes.size(), training_steps(general_size, batch_size, epochs)), skill_steps);
      break;
    case TrainingMethod::ptm:
      report.total_steps = training_steps(*std::max_element(sizes.begin(), sizes.end()), batch_size, epochs);
      break;
  }
  return report;
}

struct CostComparison {
  CostReport cft;
  CostReport rt;
  CostReport ptm;

  double ptm_over_rt() const { return static_cast<double>(ptm.total_steps) / static_cast<double>(rt.total_steps); }
  double ptm_over_cft() const { return static_cast<double>(ptm.total_steps) / static_cast<double>(cft.total_steps); }
};

inline CostComparison compare_costs(const std::vector<std::uint64_t>& subsample_sizes, std::uint64_t general_size,
                                    std::uint64_t batch_size, std::uint64_t epochs) {
  return {cost_steps(TrainingMethod::cft, subsample_sizes, general_size, batch_size, epochs),
          cost_steps(TrainingMethod::rt, subsample_sizes, general_size, batch_size, epochs),
          cost_steps(TrainingMethod::ptm, subsample_sizes, general_size, batch_size, epochs)};
}

inline nlohmann::ordered_json cost_json(const CostReport& report) {
  return {{"method", training_method_name(report.method)},
          {"subsample_sizes", report.subsample_sizes},
          {"general_size", report.general_size},
          {"batch_size", report.batch_size},
          {"epochs", report.epochs},
          {"total_steps", report.total_steps}};
}

inline std::string cost_text(const CostReport& report) {
  std::ostringstream out;
  out << training_method_name(report.method) << ": " << report.total_steps << " steps (" << report.subsample_sizes.size()
      << " subsample" << (report.subsample_sizes.size() == 1 ? "" : "s");
  if (report.method == TrainingMethod::rt) out << ", |G|=" << report.general_size;
  out << ", batch " << report.batch_size << ", epochs " << report.epochs << ")";
  return out.str();
}

}  // namespace patchkit
