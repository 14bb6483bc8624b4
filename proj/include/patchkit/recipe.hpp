#pragma once

// Declarative merge recipes: schema, JSON/TOML parsing, canonical JSON
// serialization, the dataset-size heuristic for omega, omega sweeps and
// key=value overrides. Recipes are plain data; nothing here touches a file
// other than load_recipe().

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "patchkit/dtype.hpp"
#include "patchkit/error.hpp"
#include "patchkit/merge.hpp"
#include "patchkit/task_vector.hpp"

namespace patchkit {

enum class MergeMethod { task_arithmetic, linear_interpolation, wise_ft };
enum class SkillKind { model, vector };

inline std::string_view method_name(MergeMethod method) {
  switch (method) {
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::linear_interpolation: return "linear_interpolation";
    case MergeMethod::wise_ft: return "wise_ft";
  }
  return "?";
}

inline std::optional<MergeMethod> parse_method(std::string_view text) {
  for (auto m : {MergeMethod::task_arithmetic, MergeMethod::linear_interpolation, MergeMethod::wise_ft}) {
    if (text == method_name(m)) return m;
  }
  return std::nullopt;
}

inline std::string_view kind_name(SkillKind kind) { return kind == SkillKind::model ? "model" : "vector"; }

inline std::optional<SkillKind> parse_kind(std::string_view text) {
  if (text == "model") return SkillKind::model;
  if (text == "vector") return SkillKind::vector;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Heuristic omega = |D| / |G|

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  // Exact long division, rounded half up at `digits` decimals.
  std::string decimal(int digits) const {
    std::uint64_t whole = num / den;
    std::uint64_t rem = num % den;
    std::vector<int> frac;
    for (int i = 0; i <= digits; ++i) {
      rem *= 10;
      frac.push_back(static_cast<int>(rem / den));
      rem %= den;
    }
    const bool up = frac.back() >= 5;
    frac.pop_back();
    if (up) {
      int i = digits - 1;
      for (; i >= 0; --i) {
        if (++frac[i] < 10) break;
        frac[i] = 0;
      }
      if (i < 0) ++whole;
    }
    std::string out = std::to_string(whole);
    if (digits > 0) {
      out += '.';
      for (int d : frac) out += static_cast<char>('0' + d);
    }
    return out;
  }

  bool operator==(const Rational&) const = default;
};

struct HeuristicOmega {
  Rational ratio;  // reduced; 1/1 when clamped
  double value = 0.0;
  std::optional<std::string> warning;
};

inline HeuristicOmega heuristic_omega(std::int64_t d_size, std::int64_t g_size) {
  if (d_size <= 0 || g_size <= 0) {
    throw validation_error("InvalidSize", "heuristic omega needs positive dataset sizes, got d_size=" +
                                              std::to_string(d_size) + " g_size=" + std::to_string(g_size));
  }
  HeuristicOmega out;
  if (d_size > g_size) {
    out.ratio = {1, 1};
    out.warning = "d_size " + std::to_string(d_size) + " exceeds g_size " + std::to_string(g_size) +
                  "; heuristic omega clamped to 1";
  } else {
    const auto g = std::gcd(d_size, g_size);
    out.ratio = {static_cast<std::uint64_t>(d_size / g), static_cast<std::uint64_t>(g_size / g)};
  }
  out.value = out.ratio.value();
  return out;
}

// ---------------------------------------------------------------------------
// Schema

struct RecipeSkill {
  std::string source;
  SkillKind kind = SkillKind::model;
  bool heuristic = false;  // omega given as "heuristic"; `omega` holds the resolved value
  double omega = 1.0;
  std::optional<std::int64_t> d_size;
  Preprocessor preprocessor;

  bool operator==(const RecipeSkill&) const = default;
};

struct MergeRecipe {
  MergeMethod method = MergeMethod::task_arithmetic;
  std::optional<std::string> base_model;
  std::string general_model;
  std::vector<RecipeSkill> skills;
  std::optional<std::int64_t> g_size;
  std::string output;
  std::optional<DType> output_dtype;  // empty: same_as_general
  MissingKeyPolicy missing_key_policy = MissingKeyPolicy::strict;

  bool operator==(const MergeRecipe&) const = default;
};

inline constexpr std::string_view kSameAsGeneral = "same_as_general";
inline constexpr std::string_view kHeuristic = "heuristic";

namespace detail {

inline Error schema_error(const std::string& path, const std::string& message) {
  return validation_error("InvalidRecipe", path + ": " + message);
}

inline std::string skill_path(std::size_t i, std::string_view field = {}) {
  std::string out = "skills[" + std::to_string(i) + "]";
  if (!field.empty()) out += "." + std::string(field);
  return out;
}

// Field access on one JSON object that remembers which keys were read, so
// anything left over can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& object, std::string path) : object_(object), path_(std::move(path)) {
    if (!object_.is_object()) throw schema_error(path_.empty() ? "recipe" : path_, "expected an object");
  }

  const nlohmann::json* get(std::string_view key) {
    used_.emplace_back(key);
    auto it = object_.find(std::string(key));
    return it == object_.end() ? nullptr : &*it;
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  std::optional<std::string> string(std::string_view key) {
    const auto* value = get(key);
    if (!value) return std::nullopt;
    if (!value->is_string()) throw schema_error(field(key), "expected a string");
    return value->get<std::string>();
  }

  std::string required_string(std::string_view key) {
    auto value = string(key);
    if (!value) throw validation_error("MissingField", field(key) + ": required");
    if (value->empty()) throw schema_error(field(key), "must be nonempty");
    return *value;
  }

  std::optional<std::int64_t> integer(std::string_view key) {
    const auto* value = get(key);
    if (!value) return std::nullopt;
    if (!value->is_number_integer()) throw schema_error(field(key), "expected an integer");
    if (value->is_number_unsigned() && value->get<std::uint64_t>() > INT64_MAX) {
      throw schema_error(field(key), "out of range");
    }
    return value->get<std::int64_t>();
  }

  std::optional<std::uint64_t> unsigned_integer(std::string_view key) {
    const auto* value = get(key);
    if (!value) return std::nullopt;
    if (!value->is_number_integer()) throw schema_error(field(key), "expected an integer");
    if (!value->is_number_unsigned()) throw schema_error(field(key), "must be nonnegative");
    return value->get<std::uint64_t>();
  }

  std::optional<double> real(std::string_view key) {
    const auto* value = get(key);
    if (!value) return std::nullopt;
    if (!value->is_number()) throw schema_error(field(key), "expected a number");
    return value->get<double>();
  }

  void reject_unknown() const {
    for (const auto& [key, value] : object_.items()) {
      if (std::find(used_.begin(), used_.end(), key) == used_.end()) {
        throw validation_error("UnknownKey", field(key) + ": unknown key");
      }
    }
  }

 private:
  const nlohmann::json& object_;
  std::string path_;
  std::vector<std::string> used_;
};

inline Preprocessor parse_preprocessor(const nlohmann::json* node, const std::string& path) {
  Preprocessor out;
  if (!node) return out;
  std::string type;
  std::optional<ObjectReader> reader;
  if (node->is_string()) {
    type = node->get<std::string>();
  } else if (node->is_object()) {
    reader.emplace(*node, path);
    type = reader->required_string("type");
  } else {
    throw schema_error(path, "expected \"none\", \"ties\", \"dare\" or an object with a \"type\"");
  }
  if (type == "none") {
    out.kind = PreprocessorKind::none;
  } else if (type == "ties") {
    out.kind = PreprocessorKind::ties;
    if (reader) {
      if (auto density = reader->real("density")) out.ties.density = *density;
    }
    try {
      out.ties.validate();
    } catch (const Error& e) {
      throw validation_error(e.kind(), path + ".density: " + e.what());
    }
  } else if (type == "dare") {
    out.kind = PreprocessorKind::dare;
    if (reader) {
      if (auto drop = reader->real("drop_p")) out.dare.drop_p = *drop;
      if (auto seed = reader->unsigned_integer("seed")) out.dare.seed = *seed;
    }
    try {
      out.dare.validate();
    } catch (const Error& e) {
      throw validation_error(e.kind(), path + ".drop_p: " + e.what());
    }
  } else {
    throw schema_error(path + (reader ? ".type" : ""), "unknown preprocessor '" + type + "'");
  }
  if (reader) reader->reject_unknown();
  return out;
}

inline nlohmann::ordered_json preprocessor_json(const Preprocessor& pre) {
  switch (pre.kind) {
    case PreprocessorKind::none: return "none";
    case PreprocessorKind::ties: return {{"type", "ties"}, {"density", pre.ties.density}};
    case PreprocessorKind::dare: return {{"type", "dare"}, {"drop_p", pre.dare.drop_p}, {"seed", pre.dare.seed}};
  }
  return "none";
}

}  // namespace detail

// Checks the cross-field rules and resolves heuristic omegas in place.
inline void validate_recipe(MergeRecipe& recipe) {
  using detail::schema_error;
  using detail::skill_path;
  if (recipe.general_model.empty()) throw validation_error("MissingField", "general_model: required");
  if (recipe.output.empty()) throw validation_error("MissingField", "output: required");
  if (recipe.method == MergeMethod::wise_ft) {
    if (recipe.base_model) {
      throw validation_error("ConflictingFields", "base_model: wise_ft interpolates general and continued-"
                                                  "finetuned models and takes no base_model");
    }
  } else if (!recipe.base_model || recipe.base_model->empty()) {
    throw validation_error("MissingField", "base_model: required for " + std::string(method_name(recipe.method)));
  }
  if (recipe.skills.empty()) throw validation_error("MissingField", "skills: at least one skill is required");
  if (recipe.method != MergeMethod::task_arithmetic && recipe.skills.size() != 1) {
    throw validation_error("ExactlyOneSkillRequired", "skills: " + std::string(method_name(recipe.method)) +
                                                          " takes exactly one skill, got " +
                                                          std::to_string(recipe.skills.size()));
  }
  if (recipe.output_dtype && !is_arithmetic(*recipe.output_dtype)) {
    throw validation_error("InvalidOutputDtype",
                           "output_dtype: must be F32, F16, BF16 or same_as_general, got " +
                               std::string(dtype_name(*recipe.output_dtype)));
  }
  if (recipe.g_size && *recipe.g_size <= 0) throw schema_error("g_size", "must be positive");

  for (std::size_t i = 0; i < recipe.skills.size(); ++i) {
    auto& skill = recipe.skills[i];
    if (skill.source.empty()) throw validation_error("MissingField", skill_path(i, "source") + ": required");
    if (skill.d_size && *skill.d_size <= 0) throw schema_error(skill_path(i, "d_size"), "must be positive");
    if (recipe.method == MergeMethod::wise_ft && skill.kind != SkillKind::model) {
      throw validation_error("InvalidSkillKind",
                             skill_path(i, "kind") + ": wise_ft needs the continued-finetuned model, not a vector");
    }
    if (recipe.method != MergeMethod::task_arithmetic && skill.preprocessor.kind != PreprocessorKind::none) {
      throw validation_error("UnsupportedPreprocessor", skill_path(i, "preprocessor") +
                                                            ": TIES/DARE apply to task_arithmetic merges only");
    }
    if (skill.heuristic) {
      if (!skill.d_size) {
        throw validation_error("MissingField", skill_path(i, "d_size") + ": required when omega is \"heuristic\"");
      }
      if (!recipe.g_size) {
        throw validation_error("MissingField", "g_size: required when any omega is \"heuristic\"");
      }
      skill.omega = heuristic_omega(*skill.d_size, *recipe.g_size).value;
    }
    try {
      check_omega(skill.omega);
    } catch (const Error& e) {
      throw validation_error(e.kind(), skill_path(i, "omega") + ": " + e.what());
    }
  }
  if (recipe.method == MergeMethod::task_arithmetic) {
    const auto ties = std::count_if(recipe.skills.begin(), recipe.skills.end(), [](const RecipeSkill& s) {
      return s.preprocessor.kind == PreprocessorKind::ties;
    });
    if (ties > 0 && static_cast<std::size_t>(ties) != recipe.skills.size()) {
      throw validation_error("InconsistentTies", "skills: TIES merges every skill together; set it on all skills or none");
    }
    for (std::size_t i = 1; ties > 0 && i < recipe.skills.size(); ++i) {
      if (!(recipe.skills[i].preprocessor.ties == recipe.skills[0].preprocessor.ties)) {
        throw validation_error("InconsistentTies", skill_path(i, "preprocessor") + ": all TIES skills must share one density");
      }
    }
  }
}

// Non-fatal notes about a valid recipe (extrapolating omegas, clamped heuristics).
inline std::vector<std::string> recipe_warnings(const MergeRecipe& recipe) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < recipe.skills.size(); ++i) {
    const auto& skill = recipe.skills[i];
    if (skill.heuristic && skill.d_size && recipe.g_size) {
      if (auto warning = heuristic_omega(*skill.d_size, *recipe.g_size).warning) {
        out.push_back(detail::skill_path(i) + ": " + *warning);
      }
    }
    if (auto warning = check_omega(skill.omega)) out.push_back(detail::skill_path(i, "omega") + ": " + *warning);
  }
  return out;
}

inline MergeRecipe recipe_from_json(const nlohmann::json& document) {
  using detail::schema_error;
  detail::ObjectReader top(document, "");
  MergeRecipe recipe;

  const auto method = top.required_string("method");
  if (auto m = parse_method(method)) {
    recipe.method = *m;
  } else {
    throw schema_error("method", "unknown method '" + method + "' (task_arithmetic, linear_interpolation, wise_ft)");
  }
  if (auto base = top.string("base_model")) {
    if (base->empty()) throw schema_error("base_model", "must be nonempty");
    recipe.base_model = *base;
  }
  recipe.general_model = top.required_string("general_model");
  recipe.output = top.required_string("output");
  recipe.g_size = top.integer("g_size");
  if (auto dtype = top.string("output_dtype"); dtype && *dtype != kSameAsGeneral) {
    const auto parsed = parse_dtype(*dtype);
    if (!parsed) throw validation_error("InvalidOutputDtype", "output_dtype: unknown dtype '" + *dtype + "'");
    recipe.output_dtype = *parsed;
  }
  if (auto policy = top.string("missing_key_policy")) {
    const auto parsed = parse_policy(*policy);
    if (!parsed) throw schema_error("missing_key_policy", "unknown policy '" + *policy + "' (strict, skip, zeros)");
    recipe.missing_key_policy = *parsed;
  }

  const auto* skills = top.get("skills");
  if (!skills) throw validation_error("MissingField", "skills: required");
  if (!skills->is_array()) throw schema_error("skills", "expected an array");
  for (std::size_t i = 0; i < skills->size(); ++i) {
    detail::ObjectReader reader((*skills)[i], detail::skill_path(i));
    RecipeSkill skill;
    skill.source = reader.required_string("source");
    const auto kind = reader.required_string("kind");
    if (auto k = parse_kind(kind)) {
      skill.kind = *k;
    } else {
      throw schema_error(reader.field("kind"), "unknown kind '" + kind + "' (model, vector)");
    }
    const auto* omega = reader.get("omega");
    if (!omega) throw validation_error("MissingField", reader.field("omega") + ": required");
    if (omega->is_string() && omega->get<std::string>() == kHeuristic) {
      skill.heuristic = true;
    } else if (omega->is_number()) {
      skill.omega = omega->get<double>();
    } else {
      throw schema_error(reader.field("omega"), "expected a number or \"heuristic\"");
    }
    skill.d_size = reader.integer("d_size");
    skill.preprocessor = detail::parse_preprocessor(reader.get("preprocessor"), reader.field("preprocessor"));
    reader.reject_unknown();
    recipe.skills.push_back(std::move(skill));
  }
  top.reject_unknown();
  validate_recipe(recipe);
  return recipe;
}

// Canonical JSON form; optional fields are written only when set.
inline nlohmann::ordered_json recipe_to_json(const MergeRecipe& recipe) {
  nlohmann::ordered_json out;
  out["method"] = method_name(recipe.method);
  if (recipe.base_model) out["base_model"] = *recipe.base_model;
  out["general_model"] = recipe.general_model;
  auto& skills = out["skills"] = nlohmann::ordered_json::array();
  for (const auto& skill : recipe.skills) {
    nlohmann::ordered_json entry;
    entry["source"] = skill.source;
    entry["kind"] = kind_name(skill.kind);
    if (skill.heuristic) {
      entry["omega"] = kHeuristic;
    } else {
      entry["omega"] = skill.omega;
    }
    if (skill.d_size) entry["d_size"] = *skill.d_size;
    entry["preprocessor"] = detail::preprocessor_json(skill.preprocessor);
    skills.push_back(std::move(entry));
  }
  if (recipe.g_size) out["g_size"] = *recipe.g_size;
  out["output"] = recipe.output;
  out["output_dtype"] = recipe.output_dtype ? dtype_name(*recipe.output_dtype) : kSameAsGeneral;
  out["missing_key_policy"] = policy_name(recipe.missing_key_policy);
  return out;
}

inline std::string serialize_recipe(const MergeRecipe& recipe) { return recipe_to_json(recipe).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Parsing

enum class RecipeFormat { automatic, json, toml };

namespace detail {

inline nlohmann::json toml_to_json(const toml::node& node, const std::string& path) {
  if (const auto* table = node.as_table()) {
    auto out = nlohmann::json::object();
    for (const auto& [key, value] : *table) {
      const std::string name(key.str());
      out[name] = toml_to_json(value, path.empty() ? name : path + "." + name);
    }
    return out;
  }
  if (const auto* array = node.as_array()) {
    auto out = nlohmann::json::array();
    for (std::size_t i = 0; i < array->size(); ++i) {
      out.push_back(toml_to_json(*array->get(i), path + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw schema_error(path, "dates and times are not recipe values");
}

inline nlohmann::json parse_json_document(std::string_view text) {
  // Per-object key sets; nlohmann would otherwise keep the last duplicate.
  std::vector<std::vector<std::string>> scopes;
  std::string duplicate;
  auto on_event = [&](int, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
    using E = nlohmann::json::parse_event_t;
    if (event == E::object_start) scopes.emplace_back();
    if (event == E::object_end) scopes.pop_back();
    if (event == E::key && !scopes.empty()) {
      auto key = parsed.get<std::string>();
      auto& keys = scopes.back();
      if (std::find(keys.begin(), keys.end(), key) != keys.end() && duplicate.empty()) duplicate = key;
      keys.push_back(std::move(key));
    }
    return true;
  };
  nlohmann::json document;
  try {
    document = nlohmann::json::parse(text, on_event);
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("MalformedRecipe", std::string("invalid JSON: ") + e.what());
  }
  if (!duplicate.empty()) throw validation_error("MalformedRecipe", "duplicate key '" + duplicate + "'");
  return document;
}

inline nlohmann::json parse_toml_document(std::string_view text) {
  try {
    return toml_to_json(toml::parse(text), "");
  } catch (const toml::parse_error& e) {
    std::ostringstream message;
    message << "invalid TOML at line " << e.source().begin.line << ": " << e.description();
    throw validation_error("MalformedRecipe", message.str());
  }
}

}  // namespace detail

// JSON is the canonical form; TOML is accepted for convenience. With
// `automatic`, a document whose first non-blank character is '{' is JSON.
inline MergeRecipe parse_recipe(std::string_view text, RecipeFormat format = RecipeFormat::automatic) {
  if (format == RecipeFormat::automatic) {
    const auto first = text.find_first_not_of(" \t\r\n");
    format = first != std::string_view::npos && text[first] == '{' ? RecipeFormat::json : RecipeFormat::toml;
  }
  return recipe_from_json(format == RecipeFormat::json ? detail::parse_json_document(text)
                                                       : detail::parse_toml_document(text));
}

// Makes every relative path in the recipe relative to `dir` instead.
inline void resolve_paths(MergeRecipe& recipe, const std::filesystem::path& dir) {
  auto fix = [&dir](std::string& path) {
    const std::filesystem::path p(path);
    if (p.is_relative()) path = (dir / p).lexically_normal().string();
  };
  if (recipe.base_model) fix(*recipe.base_model);
  fix(recipe.general_model);
  fix(recipe.output);
  for (auto& skill : recipe.skills) fix(skill.source);
}

// Reads a recipe file; relative paths inside it are taken relative to the
// file's own directory.
inline MergeRecipe load_recipe(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("OpenFailed", "cannot open recipe " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const auto ext = path.extension().string();
  const auto format = ext == ".toml" ? RecipeFormat::toml : ext == ".json" ? RecipeFormat::json : RecipeFormat::automatic;
  auto recipe = parse_recipe(buffer.str(), format);
  resolve_paths(recipe, std::filesystem::absolute(path).parent_path());
  return recipe;
}

// ---------------------------------------------------------------------------
// Overrides: "key=value" with dotted paths into the canonical JSON form, e.g.
// "output=out.st", "skills[0].omega=0.4", "skills.0.preprocessor=ties".
// "omega=x" is shorthand for skills[0].omega on single-skill recipes. Values
// are parsed as JSON when possible and taken as strings otherwise.

inline MergeRecipe apply_overrides(const MergeRecipe& recipe, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return recipe;
  nlohmann::json document = nlohmann::json::parse(recipe_to_json(recipe).dump());
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw validation_error("InvalidOverride", "override '" + item + "' is not key=value");
    }
    std::string key = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    if (key == "omega") {
      if (recipe.skills.size() != 1) {
        throw validation_error("InvalidOverride", "'omega' is ambiguous with several skills; use skills[i].omega");
      }
      key = "skills[0].omega";
    }
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      value = text;
    }
    // "a[0].b" and "a.0.b" name the same field.
    std::string normalized;
    for (char c : key) {
      if (c == '[') {
        normalized += '.';
      } else if (c != ']') {
        normalized += c;
      }
    }
    nlohmann::json* node = &document;
    std::stringstream parts(normalized);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i < path.size(); ++i) {
      const bool last = i + 1 == path.size();
      if (node->is_array()) {
        const bool numeric = !path[i].empty() && std::all_of(path[i].begin(), path[i].end(), ::isdigit);
        const std::size_t index = numeric ? std::stoul(path[i]) : node->size();
        if (index >= node->size()) throw validation_error("InvalidOverride", "override '" + key + "': no such element");
        node = &(*node)[index];
      } else if (node->is_object() && !path[i].empty()) {
        if (!last && !node->contains(path[i])) {
          throw validation_error("InvalidOverride", "override '" + key + "': no such field");
        }
        node = &(*node)[path[i]];
      } else {
        throw validation_error("InvalidOverride", "override '" + key + "': cannot descend into a value");
      }
    }
    *node = std::move(value);
  }
  return recipe_from_json(document);
}

// ---------------------------------------------------------------------------
// Sweeps

// "out/merged.st" -> "out/merged_w0.40.st"
inline std::string sweep_output(const std::string& output, double omega) {
  char suffix[32];
  std::snprintf(suffix, sizeof suffix, "_w%.2f", omega);
  const std::filesystem::path p(output);
  return (p.parent_path() / (p.stem().string() + suffix + p.extension().string())).string();
}

// One recipe per grid value, in grid order. Values that format to the same
// two-decimal suffix would collide on disk, so later ones are dropped.
inline std::vector<MergeRecipe> expand_sweep(const MergeRecipe& recipe, const std::vector<double>& grid,
                                             std::vector<std::string>* warnings = nullptr) {
  if (recipe.skills.size() != 1) {
    throw validation_error("SweepNeedsOneSkill", "sweeps vary one omega; the recipe has " +
                                                     std::to_string(recipe.skills.size()) + " skills");
  }
  if (grid.empty()) throw validation_error("EmptyGrid", "the omega grid is empty");
  std::vector<MergeRecipe> out;
  std::vector<std::string> seen;
  for (double omega : grid) {
    if (!(omega > 0.0 && omega <= kMaxAbsOmega)) {
      throw validation_error("InvalidGridValue", "grid values must lie in (0, 2], got " + detail::format_real(omega));
    }
    auto expanded = recipe;
    expanded.output = sweep_output(recipe.output, omega);
    if (std::find(seen.begin(), seen.end(), expanded.output) != seen.end()) {
      if (warnings) warnings->push_back("duplicate grid value " + detail::format_real(omega) + " dropped");
      continue;
    }
    seen.push_back(expanded.output);
    auto& skill = expanded.skills.front();
    skill.heuristic = false;
    skill.omega = omega;
    out.push_back(std::move(expanded));
  }
  return out;
}

}  // namespace patchkit
