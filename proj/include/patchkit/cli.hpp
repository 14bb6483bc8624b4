#pragma once

// The `patchkit` command line. run_cli() takes the arguments after the
// program name and returns the process exit status:
//   0 success, 1 validation error, 2 I/O error, 3 numeric error or failed
//   invariant.
// Data goes to `out`; diagnostics go to `err`.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "patchkit/checkpoint.hpp"
#include "patchkit/cost.hpp"
#include "patchkit/engine.hpp"
#include "patchkit/merge.hpp"
#include "patchkit/recipe.hpp"
#include "patchkit/testkit.hpp"

namespace patchkit::cli {

inline constexpr int kOk = 0;
inline constexpr int kValidation = static_cast<int>(ErrorCategory::validation);
inline constexpr int kIo = static_cast<int>(ErrorCategory::io);
inline constexpr int kNumeric = static_cast<int>(ErrorCategory::numeric);

namespace detail {

inline std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) throw validation_error("InvalidList", "empty entry in '" + text + "'");
    out.push_back(item.substr(first, last - first + 1));
  }
  return out;
}

inline double parse_real(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || used == 0 || !std::isfinite(value)) {
    throw validation_error("InvalidNumber", what + ": '" + text + "' is not a number");
  }
  return value;
}

inline std::uint64_t parse_count(const std::string& text, const std::string& what) {
  const bool digits = !text.empty() && std::all_of(text.begin(), text.end(), ::isdigit);
  if (!digits || text.size() > 19) {
    throw validation_error("InvalidNumber", what + ": '" + text + "' is not a nonnegative integer");
  }
  return std::stoull(text);
}

inline std::string shape_text(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? ", " : "") + std::to_string(shape[i]);
  return out + "]";
}

inline void print_warnings(std::ostream& err, const std::vector<std::string>& warnings) {
  for (const auto& warning : warnings) err << "warning: " << warning << "\n";
}

}  // namespace detail

struct GlobalOptions {
  unsigned threads = 0;
};

// ---------------------------------------------------------------------------
// Commands

inline int cmd_merge(const std::string& recipe_path, const std::vector<std::string>& overrides, bool force,
                     bool allow_nonfinite, const GlobalOptions& global, std::ostream& out, std::ostream& err) {
  const auto recipe = apply_overrides(load_recipe(recipe_path), overrides);
  const auto run = run_recipe(recipe, {global.threads, force, allow_nonfinite, true});
  detail::print_warnings(err, run.warnings);
  out << "wrote " << run.recipe.output << " (" << run.merge.stats.size() << " tensors, " << std::fixed
      << std::setprecision(3) << run.wall_seconds << " s)\n";
  out << "report " << run.report_path.string() << "\n";
  return kOk;
}

inline int cmd_sweep(const std::string& recipe_path, const std::string& grid_text,
                     const std::vector<std::string>& overrides, bool keep_going, bool force, bool allow_nonfinite,
                     const GlobalOptions& global, std::ostream& out, std::ostream& err) {
  std::vector<double> grid;
  if (!grid_text.empty()) {
    for (const auto& item : detail::split_csv(grid_text)) grid.push_back(detail::parse_real(item, "--grid"));
  }
  const auto recipe = apply_overrides(load_recipe(recipe_path), overrides);
  std::vector<std::string> warnings;
  const auto recipes = expand_sweep(recipe, grid, &warnings);
  detail::print_warnings(err, warnings);

  int status = kOk;
  std::vector<std::pair<double, std::string>> rows;
  for (const auto& expanded : recipes) {
    const double omega = expanded.skills.front().omega;
    try {
      const auto run = run_recipe(expanded, {global.threads, force, allow_nonfinite, true});
      detail::print_warnings(err, run.warnings);
      rows.emplace_back(omega, run.recipe.output);
    } catch (const Error& e) {
      err << "error: omega " << patchkit::detail::format_real(omega) << ": " << e.what() << "\n";
      rows.emplace_back(omega, "FAILED");
      if (status == kOk) status = static_cast<int>(e.category());
      if (!keep_going) break;
    }
  }
  out << "omega\toutput\n";
  for (const auto& [omega, path] : rows) {
    char text[32];
    std::snprintf(text, sizeof text, "%.2f", omega);
    out << text << "\t" << path << "\n";
  }
  return status;
}

inline int cmd_diff(const std::string& model_path, const std::string& base_path, const std::string& out_path,
                    bool force, const std::string& policy_text, const GlobalOptions& global, std::ostream& out,
                    std::ostream& err) {
  const auto policy = parse_policy(policy_text);
  if (!policy) throw validation_error("InvalidPolicy", "unknown missing-key policy '" + policy_text + "'");
  MergeOptions options;
  options.missing_keys = *policy;
  options.write = {force ? WriteMode::overwrite : WriteMode::fail_if_exists, global.threads};
  const auto model = open_checkpoint(model_path);
  const auto base = open_checkpoint(base_path);
  const auto report = arithmetic_compat(model, base);
  if (!report.compatible() && *policy != MissingKeyPolicy::strict) err << "warning: " << report.summary() << "\n";
  const auto vector = compute_task_vector(model, base, out_path, options);
  out << "wrote " << out_path << " (" << vector.names().size() << " tensors)\n";
  return kOk;
}

inline int cmd_inspect(const std::string& path, bool json, std::ostream& out) {
  const auto manifest = open_checkpoint(path);
  std::vector<const TensorRecord*> records;
  for (const auto& record : manifest.records()) records.push_back(&record);
  std::sort(records.begin(), records.end(), [](auto* a, auto* b) { return a->begin < b->begin; });

  if (json) {
    nlohmann::ordered_json doc;
    doc["path"] = path;
    doc["role"] = manifest.role();
    doc["metadata"] = manifest.metadata();
    doc["data_bytes"] = manifest.total_data_bytes();
    auto& tensors = doc["tensors"] = nlohmann::ordered_json::array();
    for (const auto* r : records) {
      tensors.push_back({{"name", r->name},
                         {"dtype", dtype_name(r->dtype)},
                         {"shape", r->shape},
                         {"bytes", r->end - r->begin},
                         {"data_offsets", {r->begin, r->end}}});
    }
    out << doc.dump(2) << "\n";
    return kOk;
  }

  out << "path: " << path << "\n";
  out << "role: " << (manifest.role().empty() ? "(none)" : manifest.role()) << "\n";
  for (const auto& [key, value] : manifest.metadata()) {
    if (key != kRoleKey) out << "meta: " << key << " = " << value << "\n";
  }
  out << "tensors: " << records.size() << ", data bytes: " << manifest.total_data_bytes() << "\n";
  std::size_t name_width = 4, shape_width = 5;
  for (const auto* r : records) {
    name_width = std::max(name_width, r->name.size());
    shape_width = std::max(shape_width, detail::shape_text(r->shape).size());
  }
  auto row = [&](const std::string& name, const std::string& dtype, const std::string& shape, const std::string& bytes) {
    out << std::left << std::setw(static_cast<int>(name_width)) << name << "  " << std::setw(5) << dtype << "  "
        << std::setw(static_cast<int>(shape_width)) << shape << "  " << bytes << "\n";
  };
  row("NAME", "DTYPE", "SHAPE", "BYTES");
  for (const auto* r : records) {
    row(r->name, std::string(dtype_name(r->dtype)), detail::shape_text(r->shape), std::to_string(r->end - r->begin));
  }
  return kOk;
}

struct CostArgs {
  std::string method;
  std::string sizes;
  std::uint64_t general = 0;
  std::uint64_t batch = 128;
  std::uint64_t epochs = 1;
  bool compare = false;
  bool json = false;
};

inline int cmd_cost(const CostArgs& args, std::ostream& out) {
  std::vector<std::uint64_t> sizes;
  if (!args.sizes.empty()) {
    for (const auto& item : detail::split_csv(args.sizes)) sizes.push_back(detail::parse_count(item, "--sizes"));
  }
  if (args.compare) {
    const auto c = compare_costs(sizes, args.general, args.batch, args.epochs);
    if (args.json) {
      out << nlohmann::ordered_json{{"cft", cost_json(c.cft)},
                                    {"rt", cost_json(c.rt)},
                                    {"ptm", cost_json(c.ptm)},
                                    {"ptm_over_rt", c.ptm_over_rt()},
                                    {"ptm_over_cft", c.ptm_over_cft()}}
                 .dump(2)
          << "\n";
    } else {
      out << cost_text(c.cft) << "\n" << cost_text(c.rt) << "\n" << cost_text(c.ptm) << "\n";
      out << std::fixed << std::setprecision(4) << "PTM/RT: " << c.ptm_over_rt() << "\n"
          << "PTM/CFT: " << c.ptm_over_cft() << "\n";
    }
    return kOk;
  }
  if (args.method.empty()) throw validation_error("MissingMethod", "--method is required unless --compare is given");
  const auto method = parse_training_method(args.method);
  if (!method) throw validation_error("InvalidMethod", "unknown method '" + args.method + "' (cft, rt, ptm)");
  const auto report = cost_steps(*method, sizes, args.general, args.batch, args.epochs);
  out << (args.json ? cost_json(report).dump(2) : cost_text(report)) << "\n";
  return kOk;
}

inline int cmd_verify(const std::vector<std::string>& suite_names, std::uint64_t seed, bool json,
                      const GlobalOptions& global, std::ostream& out) {
  std::vector<testkit::Suite> suites;
  for (const auto& name : suite_names) {
    const auto suite = testkit::parse_suite(name);
    if (!suite) {
      throw validation_error("UnknownSuite",
                             "unknown suite '" + name + "' (endpoints, linearity, equivalence, sparsify, roundtrip)");
    }
    suites.push_back(*suite);
  }
  if (suites.empty()) suites.assign(std::begin(testkit::kAllSuites), std::end(testkit::kAllSuites));
  testkit::RunnerOptions options;
  options.threads = global.threads;
  const auto report = testkit::run_invariants(suites, seed, options);
  if (json) {
    out << report.json().dump(2) << "\n";
  } else {
    out << report.text();
  }
  return report.passed() ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Merge task vectors into instruction-tuned checkpoints", "patchkit"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions global;
  app.add_option("--threads", global.threads, "Worker threads for per-tensor work (default: $PATCHKIT_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  std::string recipe_path, grid, model_path, base_path, out_path, inspect_path, policy = "strict";
  std::vector<std::string> overrides, suites;
  bool force = false, keep_going = false, json = false, allow_nonfinite = false;
  std::uint64_t seed = 0;
  CostArgs cost;

  auto* merge = app.add_subcommand("merge", "Run a merge recipe");
  merge->add_option("recipe", recipe_path, "Recipe file (JSON or TOML)")->required();
  merge->add_option("--set", overrides, "Override a recipe field, e.g. omega=0.4 or skills[1].omega=0.2");
  merge->add_flag("--force", force, "Overwrite existing outputs");
  merge->add_flag("--allow-nonfinite", allow_nonfinite, "Pass NaN/Inf through instead of aborting");

  auto* sweep = app.add_subcommand("sweep", "Run a single-skill recipe once per omega in a grid");
  sweep->add_option("recipe", recipe_path, "Recipe file (JSON or TOML)")->required();
  sweep->add_option("--grid", grid, "Comma-separated omegas in (0, 2]")->required();
  sweep->add_option("--set", overrides, "Override a recipe field");
  sweep->add_flag("--keep-going", keep_going, "Continue after a failed merge");
  sweep->add_flag("--force", force, "Overwrite existing outputs");
  sweep->add_flag("--allow-nonfinite", allow_nonfinite, "Pass NaN/Inf through instead of aborting");

  auto* diff = app.add_subcommand("diff", "Write the task vector MODEL - BASE");
  diff->add_option("model", model_path, "Finetuned model")->required();
  diff->add_option("base", base_path, "Model it was finetuned from")->required();
  diff->add_option("-o,--output", out_path, "Output task vector")->required();
  diff->add_option("--missing-key-policy", policy, "strict, skip or zeros");
  diff->add_flag("--force", force, "Overwrite an existing output");

  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's manifest");
  inspect->add_option("path", inspect_path, "Checkpoint file")->required();
  inspect->add_flag("--json", json, "Machine-readable output");

  auto* cost_cmd = app.add_subcommand("cost", "Training-step cost of CFT, RT and PTM");
  cost_cmd->add_option("--method", cost.method, "cft, rt or ptm");
  cost_cmd->add_option("--sizes", cost.sizes, "Comma-separated skill subsample sizes |D_i|")->required();
  cost_cmd->add_option("--general", cost.general, "General dataset size |G| (needed for rt)");
  cost_cmd->add_option("--batch", cost.batch, "Batch size")->capture_default_str();
  cost_cmd->add_option("--epochs", cost.epochs, "Epochs")->capture_default_str();
  cost_cmd->add_flag("--compare", cost.compare, "Report all three methods and the PTM/RT ratio");
  cost_cmd->add_flag("--json", cost.json, "Machine-readable output");

  auto* verify = app.add_subcommand("verify", "Check merge invariants on synthetic checkpoints");
  verify->add_option("--suite", suites, "endpoints, linearity, equivalence, sparsify or roundtrip (repeatable)");
  verify->add_option("--seed", seed, "Seed for the synthetic checkpoints")->capture_default_str();
  verify->add_flag("--json", json, "Machine-readable report");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*merge) return cmd_merge(recipe_path, overrides, force, allow_nonfinite, global, out, err);
    if (*sweep) return cmd_sweep(recipe_path, grid, overrides, keep_going, force, allow_nonfinite, global, out, err);
    if (*diff) return cmd_diff(model_path, base_path, out_path, force, policy, global, out, err);
    if (*inspect) return cmd_inspect(inspect_path, json, out);
    if (*cost_cmd) return cmd_cost(cost, out);
    if (*verify) return cmd_verify(suites, seed, json, global, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kIo;
  }
  return kValidation;
}

}  // namespace patchkit::cli
