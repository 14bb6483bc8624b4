#pragma once

// Executes a MergeRecipe and writes a JSON report next to the output.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchkit/merge.hpp"
#include "patchkit/recipe.hpp"

namespace patchkit {

struct RunOptions {
  unsigned threads = 0;  // 0: resolve_threads()
  bool force = false;    // overwrite existing outputs
  bool allow_nonfinite = false;
  bool write_report = true;
};

struct RunResult {
  MergeRecipe recipe;
  MergeResult merge;
  std::vector<std::string> warnings;
  double wall_seconds = 0.0;
  std::filesystem::path report_path;  // empty when no report was written
};

inline std::filesystem::path report_path_for(const std::filesystem::path& output) {
  auto path = output;
  path += ".report.json";
  return path;
}

namespace detail {

inline TaskVector skill_vector(const RecipeSkill& skill, const CheckpointManifest* base) {
  if (skill.kind == SkillKind::vector) return TaskVector::open(skill.source);
  return TaskVector::difference(open_checkpoint(skill.source), *base);
}

// The dtype of the general model's floating tensors, if they all agree.
inline std::optional<DType> uniform_float_dtype(const CheckpointManifest& manifest) {
  std::optional<DType> out;
  for (const auto& record : manifest.records()) {
    if (!is_arithmetic(record.dtype)) continue;
    if (out && *out != record.dtype) return std::nullopt;
    out = record.dtype;
  }
  return out;
}

inline nlohmann::ordered_json run_report(const RunResult& run) {
  const auto& recipe = run.recipe;
  nlohmann::ordered_json out;
  out["method"] = method_name(recipe.method);
  out["output"] = recipe.output;
  out["general_model"] = recipe.general_model;
  if (recipe.base_model) out["base_model"] = *recipe.base_model;
  auto& skills = out["skills"] = nlohmann::ordered_json::array();
  for (const auto& skill : recipe.skills) {
    nlohmann::ordered_json entry;
    entry["source"] = skill.source;
    entry["kind"] = kind_name(skill.kind);
    entry["omega"] = skill.omega;
    entry["omega_source"] = skill.heuristic ? "heuristic" : "fixed";
    if (skill.heuristic) {
      const auto h = heuristic_omega(*skill.d_size, *recipe.g_size);
      entry["omega_ratio"] = h.ratio.str();
      entry["d_size"] = *skill.d_size;
      entry["g_size"] = *recipe.g_size;
    }
    entry["preprocessor"] = preprocessor_json(skill.preprocessor);
    skills.push_back(std::move(entry));
  }
  out["output_dtype"] = recipe.output_dtype ? dtype_name(*recipe.output_dtype) : kSameAsGeneral;
  out["missing_key_policy"] = policy_name(recipe.missing_key_policy);
  out["warnings"] = run.warnings;
  auto& tensors = out["tensors"] = nlohmann::ordered_json::array();
  for (const auto& stat : run.merge.stats) {
    tensors.push_back({{"name", stat.name}, {"max_abs_delta", stat.max_abs_delta}});
  }
  out["wall_seconds"] = run.wall_seconds;
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto partial = path;
  partial += ".partial";
  {
    std::ofstream file(partial, std::ios::binary | std::ios::trunc);
    if (!file) throw io_error("WriteFailed", "cannot create " + partial.string());
    file << text;
    if (!file.flush()) throw io_error("WriteFailed", "cannot write " + partial.string());
  }
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw io_error("WriteFailed", "cannot rename " + partial.string() + ": " + ec.message());
}

}  // namespace detail

inline RunResult run_recipe(MergeRecipe recipe, const RunOptions& options = {}) {
  const auto start = std::chrono::steady_clock::now();
  validate_recipe(recipe);
  std::vector<std::string> warnings;
  for (const auto& skill : recipe.skills) {
    if (!skill.heuristic) continue;
    if (auto warning = heuristic_omega(*skill.d_size, *recipe.g_size).warning) warnings.push_back(*warning);
  }

  const std::filesystem::path output(recipe.output);
  const auto report = report_path_for(output);
  if (!options.force) {
    for (const auto& path : {output, report}) {
      if ((options.write_report || path == output) && std::filesystem::exists(path)) {
        throw validation_error("OutputExists", path.string() + " already exists (use --force to overwrite)");
      }
    }
  }

  MergeOptions merge;
  merge.missing_keys = recipe.missing_key_policy;
  merge.allow_nonfinite = options.allow_nonfinite;
  merge.output_dtype = recipe.output_dtype;
  merge.write = {options.force ? WriteMode::overwrite : WriteMode::fail_if_exists, options.threads};

  const auto general = open_checkpoint(recipe.general_model);
  std::optional<CheckpointManifest> base;
  if (recipe.base_model) base = open_checkpoint(*recipe.base_model);

  auto result = [&]() -> MergeResult {
    const auto& first = recipe.skills.front();
    switch (recipe.method) {
      case MergeMethod::task_arithmetic: {
        std::vector<Skill> skills;
        for (const auto& skill : recipe.skills) {
          skills.push_back({{detail::skill_vector(skill, base ? &*base : nullptr), skill.omega}, skill.preprocessor});
        }
        return apply_task_arithmetic(general, std::span<const Skill>(skills), output, merge);
      }
      case MergeMethod::linear_interpolation: {
        // Output dtypes follow the general model even though tensors are
        // laid out from the pre-trained one.
        if (!merge.output_dtype) merge.output_dtype = detail::uniform_float_dtype(general);
        const auto skill_vec = detail::skill_vector(first, &*base);
        const auto general_vec = TaskVector::difference(general, *base);
        return linear_interpolate(*base, skill_vec, general_vec, first.omega, output, merge);
      }
      case MergeMethod::wise_ft:
        return wise_ft(general, open_checkpoint(first.source), first.omega, output, merge);
    }
    throw std::logic_error("unknown merge method");
  }();
  warnings.insert(warnings.end(), result.warnings.begin(), result.warnings.end());

  RunResult run{std::move(recipe), std::move(result), std::move(warnings),
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), {}};
  if (options.write_report) {
    detail::write_text_file(report, detail::run_report(run).dump(2) + "\n");
    run.report_path = report;
  }
  return run;
}

}  // namespace patchkit
