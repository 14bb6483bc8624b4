#pragma once

// Invariant runner: checks the algebraic properties of the merge and
// sparsification operators on freshly generated synthetic checkpoints and
// reports pass/fail per check with the worst observed ULP error.

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchkit/merge.hpp"
#include "patchkit/sparsify.hpp"
#include "patchkit/synth.hpp"

namespace patchkit::testkit {

enum class Suite { endpoints, linearity, equivalence, sparsify, roundtrip };

inline constexpr Suite kAllSuites[] = {Suite::endpoints, Suite::linearity, Suite::equivalence, Suite::sparsify,
                                       Suite::roundtrip};

inline std::string_view suite_name(Suite suite) {
  switch (suite) {
    case Suite::endpoints: return "endpoints";
    case Suite::linearity: return "linearity";
    case Suite::equivalence: return "equivalence";
    case Suite::sparsify: return "sparsify";
    case Suite::roundtrip: return "roundtrip";
  }
  return "?";
}

inline std::optional<Suite> parse_suite(std::string_view text) {
  for (auto suite : kAllSuites) {
    if (text == suite_name(suite)) return suite;
  }
  return std::nullopt;
}

struct Check {
  std::string suite;
  std::string name;
  bool passed = false;
  std::optional<double> max_ulp;  // set for numeric checks
  std::optional<double> bound;
  std::string detail;
};

struct Report {
  std::uint64_t seed = 0;
  std::vector<Check> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }

  double max_ulp() const {
    double worst = 0;
    for (const auto& c : checks) {
      if (c.max_ulp) worst = std::max(worst, *c.max_ulp);
    }
    return worst;
  }

  std::string text() const {
    std::ostringstream out;
    std::size_t width = 0;
    for (const auto& c : checks) width = std::max(width, c.name.size());
    std::size_t passed_count = 0;
    for (const auto& c : checks) {
      passed_count += c.passed;
      out << (c.passed ? "PASS  " : "FAIL  ") << c.suite << std::string(12 - std::min<std::size_t>(c.suite.size(), 11), ' ')
          << c.name << std::string(width - c.name.size() + 2, ' ');
      if (c.max_ulp) {
        out << "max ulp " << detail::format_real(*c.max_ulp);
        if (c.bound) out << " (bound " << detail::format_real(*c.bound) << ")";
      }
      if (!c.detail.empty()) out << (c.max_ulp ? "  " : "") << c.detail;
      out << "\n";
    }
    out << passed_count << "/" << checks.size() << " checks passed (seed " << seed << ")\n";
    return out.str();
  }

  nlohmann::ordered_json json() const {
    nlohmann::ordered_json out;
    out["seed"] = seed;
    out["passed"] = passed();
    out["max_ulp"] = max_ulp();
    auto& list = out["checks"] = nlohmann::ordered_json::array();
    for (const auto& c : checks) {
      nlohmann::ordered_json entry;
      entry["suite"] = c.suite;
      entry["name"] = c.name;
      entry["passed"] = c.passed;
      entry["max_ulp"] = c.max_ulp ? nlohmann::ordered_json(*c.max_ulp) : nlohmann::ordered_json(nullptr);
      entry["bound"] = c.bound ? nlohmann::ordered_json(*c.bound) : nlohmann::ordered_json(nullptr);
      entry["detail"] = c.detail;
      list.push_back(std::move(entry));
    }
    return out;
  }
};

struct RunnerOptions {
  std::size_t roundtrip_cases = 200;
  std::size_t dare_elements = 1'000'000;
  unsigned threads = 0;
};

// A fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(std::string_view tag) {
    static std::atomic<std::uint64_t> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("patchkit-" + std::string(tag) + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  ~ScratchDir() {
    std::error_code ignored;
    std::filesystem::remove_all(path_, ignored);
  }

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(std::string_view name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Comparison helpers

inline constexpr double kInfiniteUlp = std::numeric_limits<double>::infinity();

// Worst bitwise ULP distance between same-named floating tensors; non-float
// tensors must match byte for byte. Any structural difference is infinite.
inline double max_ulp_between(const CheckpointManifest& a, const CheckpointManifest& b) {
  if (a.sorted_names() != b.sorted_names()) return kInfiniteUlp;
  double worst = 0;
  for (const auto& name : a.sorted_names()) {
    const auto& ra = a.at(name);
    const auto& rb = b.at(name);
    if (ra.shape != rb.shape || is_arithmetic(ra.dtype) != is_arithmetic(rb.dtype)) return kInfiniteUlp;
    if (!is_arithmetic(ra.dtype)) {
      if (read_raw(a, ra) != read_raw(b, rb)) return kInfiniteUlp;
      continue;
    }
    const auto va = read_values(a, ra);
    const auto vb = read_values(b, rb);
    for (std::size_t i = 0; i < va.size(); ++i) {
      worst = std::max(worst, static_cast<double>(ulp_distance(va[i], vb[i])));
    }
  }
  return worst;
}

inline bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  detail::ReadFile fa(a), fb(b);
  const std::uint64_t size = fa.size();
  if (fb.size() != size) return false;
  std::vector<std::byte> ba(1 << 20), bb(1 << 20);
  for (std::uint64_t offset = 0; offset < size; offset += ba.size()) {
    const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(ba.size(), size - offset));
    fa.read_at(offset, std::span(ba).first(n));
    fb.read_at(offset, std::span(bb).first(n));
    if (!std::equal(ba.begin(), ba.begin() + n, bb.begin())) return false;
  }
  return true;
}

inline Check numeric_check(Suite suite, std::string name, double worst, double bound) {
  return {std::string(suite_name(suite)), std::move(name), worst <= bound, worst, bound, {}};
}

inline Check boolean_check(Suite suite, std::string name, bool passed, std::string detail = {}) {
  return {std::string(suite_name(suite)), std::move(name), passed, std::nullopt, std::nullopt, std::move(detail)};
}

// A small model layout with a few floating tensors of varied shape plus
// integer and boolean tensors, drawn from `seed`.
inline std::vector<TensorSpec> model_layout(std::uint64_t seed, bool with_non_float = true) {
  std::mt19937_64 rng(seed);
  std::vector<TensorSpec> layout = {
      {"embed_tokens.weight", DType::F32, {64 + rng() % 64, 32}},
      {"layers.0.mlp.weight", DType::F32, {128, 16 + rng() % 48}},
      {"layers.0.norm.weight", DType::F32, {128}},
      {"lm_head.bias", DType::F32, {1 + rng() % 97}},
  };
  if (with_non_float) {
    layout.push_back({"position_ids", DType::I64, {1 + rng() % 64}});
    layout.push_back({"attention_mask", DType::BOOL, {1 + rng() % 64}});
  }
  return layout;
}

inline CheckpointManifest synth_model(const std::vector<TensorSpec>& layout, std::uint64_t seed,
                                      const std::filesystem::path& path, Distribution distribution = Uniform{},
                                      std::string_view role = kRoleModel) {
  SynthSpec spec;
  spec.seed = seed;
  spec.layout = layout;
  spec.distribution = distribution;
  spec.metadata = {{std::string(kRoleKey), std::string(role)}};
  return gen_checkpoint(spec, path);
}

// ---------------------------------------------------------------------------
// Suites

inline void run_endpoints(std::uint64_t seed, const RunnerOptions& options, std::vector<Check>& out) {
  constexpr auto S = Suite::endpoints;
  ScratchDir dir("endpoints");
  const auto layout = model_layout(seed);
  const auto pre = synth_model(layout, splitmix64(seed ^ 1), dir / "pre");
  const auto general = synth_model(layout, splitmix64(seed ^ 2), dir / "general");
  const auto skill = synth_model(layout, splitmix64(seed ^ 3), dir / "skill");
  const auto cft = synth_model(layout, splitmix64(seed ^ 4), dir / "cft");
  MergeOptions merge;
  merge.write.threads = options.threads;

  const std::vector<WeightedVector> zero = {{TaskVector::difference(skill, pre), 0.0}};
  const auto ta = apply_task_arithmetic(general, std::span<const WeightedVector>(zero), dir / "ta0", merge);
  out.push_back(numeric_check(S, "task_arithmetic omega=0 == general", max_ulp_between(ta.manifest, general), 0));

  const auto tau_skill = TaskVector::difference(skill, pre);
  const auto tau_general = TaskVector::difference(general, pre);
  const auto li0 = linear_interpolate(pre, tau_skill, tau_general, 0.0, dir / "li0", merge);
  const auto li1 = linear_interpolate(pre, tau_skill, tau_general, 1.0, dir / "li1", merge);
  // Non-float tensors of an interpolation come from the pre-trained model,
  // so only floating tensors are compared against general/skill here.
  auto float_ulp = [](const CheckpointManifest& a, const CheckpointManifest& b) {
    double worst = 0;
    for (const auto& record : a.records()) {
      if (!is_arithmetic(record.dtype)) continue;
      const auto* other = b.find(record.name);
      if (!other || other->shape != record.shape) return kInfiniteUlp;
      const auto va = read_values(a, record);
      const auto vb = read_values(b, *other);
      for (std::size_t i = 0; i < va.size(); ++i) {
        worst = std::max(worst, static_cast<double>(ulp_distance(va[i], vb[i])));
      }
    }
    return worst;
  };
  out.push_back(numeric_check(S, "linear_interpolation omega=0 == general", float_ulp(li0.manifest, general), 0));
  out.push_back(numeric_check(S, "linear_interpolation omega=1 == skill", float_ulp(li1.manifest, skill), 0));

  const auto w0 = wise_ft(general, cft, 0.0, dir / "w0", merge);
  const auto w1 = wise_ft(general, cft, 1.0, dir / "w1", merge);
  out.push_back(numeric_check(S, "wise_ft omega=0 == general", max_ulp_between(w0.manifest, general), 0));
  // Non-float tensors of a WiSE-FT output come from the general model.
  out.push_back(numeric_check(S, "wise_ft omega=1 == cft", float_ulp(w1.manifest, cft), 0));
}

inline void run_linearity(std::uint64_t seed, const RunnerOptions& options, std::vector<Check>& out) {
  constexpr auto S = Suite::linearity;
  ScratchDir dir("linearity");
  const auto layout = model_layout(seed, false);
  const auto pre = synth_model(layout, splitmix64(seed ^ 11), dir / "pre");
  const auto general = synth_model(layout, splitmix64(seed ^ 12), dir / "general");
  const auto skill = synth_model(layout, splitmix64(seed ^ 13), dir / "skill");
  const auto tau = TaskVector::difference(skill, pre);
  std::mt19937_64 rng(seed);
  const double beta = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
  MergeOptions merge;
  merge.write.threads = options.threads;

  auto merged = [&](double omega, const std::string& name) {
    const std::vector<WeightedVector> skills = {{tau, omega}};
    return apply_task_arithmetic(general, std::span<const WeightedVector>(skills), dir / name, merge).manifest;
  };
  const auto at_beta = merged(beta, "beta");
  for (double alpha : {0.5, 2.0}) {
    const auto scaled = merged(alpha * beta, "alpha" + detail::format_real(alpha));
    double worst = 0;
    for (const auto& name : general.sorted_names()) {
      const auto g = read_values(general, general.at(name));
      const auto b = read_values(at_beta, at_beta.at(name));
      const auto s = read_values(scaled, scaled.at(name));
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float lhs = s[i] - g[i];
        const float rhs = static_cast<float>(alpha) * (b[i] - g[i]);
        const double scale = std::max({std::fabs(g[i]), std::fabs(s[i]), std::fabs(b[i])});
        worst = std::max(worst, ulps_at_scale(lhs, rhs, scale));
      }
    }
    out.push_back(numeric_check(S, "merge(alpha*beta) - general == alpha*(merge(beta) - general), alpha=" +
                                       detail::format_real(alpha),
                                worst, 4));
  }
}

inline void run_equivalence(std::uint64_t seed, const RunnerOptions& options, std::vector<Check>& out) {
  constexpr auto S = Suite::equivalence;
  ScratchDir dir("equivalence");
  const auto layout = model_layout(seed, false);
  const auto general = synth_model(layout, splitmix64(seed ^ 21), dir / "general");
  const auto tau_m = synth_model(layout, splitmix64(seed ^ 22), dir / "tau", Uniform{}, kRoleTaskVector);
  std::vector<TensorEntry> cft_entries;
  for (const auto& name : general.sorted_names()) {
    auto g = read_values(general, general.at(name));
    const auto t = read_values(tau_m, tau_m.at(name));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] + t[i];
    cft_entries.push_back(make_entry(name, DType::F32, general.at(name).shape, g));
  }
  const auto cft = write_checkpoint(cft_entries, dir / "cft", {{std::string(kRoleKey), std::string(kRoleModel)}});
  const TaskVector tau(tau_m);
  MergeOptions merge;
  merge.write.threads = options.threads;

  std::mt19937_64 rng(seed);
  for (double omega : {0.2, 0.5, 0.8, std::uniform_real_distribution<double>(0.0, 1.0)(rng)}) {
    const auto tag = detail::format_real(omega);
    const auto wise = wise_ft(general, cft, omega, dir / ("wise" + tag), merge);
    const std::vector<WeightedVector> skills = {{tau, omega}};
    const auto ta = apply_task_arithmetic(general, std::span<const WeightedVector>(skills), dir / ("ta" + tag), merge);
    out.push_back(numeric_check(S, "wise_ft(general, general + tau) == task_arithmetic(tau), omega=" + tag,
                                max_ulp_between(wise.manifest, ta.manifest), 1));
  }
}

inline void run_sparsify(std::uint64_t seed, const RunnerOptions& options, std::vector<Check>& out) {
  constexpr auto S = Suite::sparsify;
  ScratchDir dir("sparsify");
  const auto layout = model_layout(seed, false);
  const TaskVector vector(synth_model(layout, splitmix64(seed ^ 31), dir / "tau", Gaussian{}, kRoleTaskVector));
  const WriteOptions write{WriteMode::fail_if_exists, options.threads};

  for (double density : {0.2, 0.5, 1.0}) {
    const auto tag = detail::format_real(density);
    const auto trimmed = ties_trim(vector, density, dir / ("trim" + tag), write);
    bool ok = true;
    std::string detail;
    for (const auto& name : vector.names()) {
      const auto before = vector.read(name);
      const auto after = trimmed.read(name);
      const auto kept = static_cast<std::size_t>(std::count_if(after.begin(), after.end(), [](float x) { return x != 0.0f; }));
      const auto expected = trim_count(before.size(), density);
      for (std::size_t i = 0; i < before.size(); ++i) {
        if (after[i] != 0.0f && after[i] != before[i]) ok = false;
      }
      if (kept != expected && detail.empty()) {
        detail = name + " kept " + std::to_string(kept) + ", expected " + std::to_string(expected);
      }
      ok = ok && kept == expected;
    }
    out.push_back(boolean_check(S, "ties_trim keeps ceil(density*n) unchanged entries, density=" + tag, ok, detail));
  }

  struct Case {
    std::vector<std::vector<float>> inputs;
    std::vector<float> expected;
  };
  const std::vector<Case> cases = {
      {{{2}, {-1}}, {2}},
      {{{1}, {1}, {-5}}, {-5}},
      {{{1}, {-1}}, {0}},
      {{{2, 0}, {4, 0}, {-1, 0}}, {3, 0}},
  };
  bool election_ok = true;
  for (const auto& c : cases) election_ok = election_ok && ties_merge_tensor(c.inputs, 1.0) == c.expected;
  out.push_back(boolean_check(S, "ties sign election matches hand-enumerated cases", election_ok));

  bool identity_ok = true;
  for (const auto& name : vector.names()) {
    const auto v = vector.read(name);
    identity_ok = identity_ok && ties_merge_tensor({v}, 1.0) == v;
  }
  out.push_back(boolean_check(S, "ties_merge of one vector at density 1 is the identity", identity_ok));

  std::vector<float> ones(options.dare_elements, 1.0f);
  dare_inplace(ones, {0.9, seed}, "ones");
  double sum = 0;
  std::size_t nonzero = 0;
  for (float x : ones) {
    sum += x;
    nonzero += x != 0.0f;
  }
  const double mean = sum / static_cast<double>(ones.size());
  const double fraction = static_cast<double>(nonzero) / static_cast<double>(ones.size());
  std::ostringstream stats;
  stats << "mean " << mean << ", nonzero fraction " << fraction;
  out.push_back(boolean_check(S, "dare p=0.9 on ones keeps mean 1 and 10% of entries",
                              mean >= 0.99 && mean <= 1.01 && fraction >= 0.099 && fraction <= 0.101, stats.str()));

  dare(vector, {0.9, seed}, dir / "dare_a", {WriteMode::fail_if_exists, 1});
  dare(vector, {0.9, seed}, dir / "dare_b", {WriteMode::fail_if_exists, std::max(2u, resolve_threads(options.threads))});
  out.push_back(boolean_check(S, "dare is deterministic across runs and thread counts",
                              same_bytes(dir / "dare_a", dir / "dare_b")));

  const std::vector<float> x = {1.0f, -2.0f, 0.5f, 3.0f, -0.125f, 7.0f, 0.0f, -1.0f};
  bool unbiased = true;
  for (double p : {0.5, 0.9}) {
    std::vector<double> sums(x.size(), 0.0);
    constexpr int kSeeds = 1000;
    for (int s = 0; s < kSeeds; ++s) {
      auto v = x;
      dare_inplace(v, {p, splitmix64(seed + static_cast<std::uint64_t>(s))}, "x");
      for (std::size_t i = 0; i < v.size(); ++i) sums[i] += v[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double stderr_ = std::fabs(x[i]) * std::sqrt(p / (1 - p)) / std::sqrt(static_cast<double>(kSeeds));
      unbiased = unbiased && std::fabs(sums[i] / kSeeds - x[i]) <= 5 * stderr_ + 1e-12;
    }
  }
  out.push_back(boolean_check(S, "dare mean over 1000 seeds is within 5 standard errors", unbiased));
}

// Random manifests over every dtype, including empty and scalar tensors.
inline std::vector<TensorEntry> random_entries(std::mt19937_64& rng) {
  static constexpr DType kTypes[] = {DType::F32, DType::F16, DType::BF16, DType::I64, DType::BOOL};
  std::vector<TensorEntry> entries;
  const int count = static_cast<int>(rng() % 7);
  for (int i = 0; i < count; ++i) {
    TensorEntry entry;
    entry.spec.name = "t" + std::to_string(rng() % 1000) + "." + std::to_string(i);
    entry.spec.dtype = kTypes[rng() % 5];
    const int rank = static_cast<int>(rng() % 4);
    for (int d = 0; d < rank; ++d) entry.spec.shape.push_back(rng() % 6);
    entry.data.resize(element_count(entry.spec.shape) * byte_width(entry.spec.dtype));
    for (auto& b : entry.data) b = static_cast<std::byte>(rng());
    entries.push_back(std::move(entry));
  }
  return entries;
}

inline void run_roundtrip(std::uint64_t seed, const RunnerOptions& options, std::vector<Check>& out) {
  constexpr auto S = Suite::roundtrip;
  ScratchDir dir("roundtrip");
  std::mt19937_64 rng(seed);
  std::size_t read_failures = 0, rewrite_failures = 0, order_failures = 0;
  std::string first_failure;
  for (std::size_t round = 0; round < options.roundtrip_cases; ++round) {
    auto entries = random_entries(rng);
    const Metadata metadata{{std::string(kRoleKey), std::string(kRoleModel)}, {"case", std::to_string(round)}};
    const auto first = dir / "first";
    const auto second = dir / "second";
    const auto shuffled = dir / "shuffled";
    write_checkpoint(entries, first, metadata, WriteMode::overwrite);
    const auto opened = open_checkpoint(first);
    std::vector<TensorEntry> reread;
    bool read_ok = opened.metadata() == metadata && opened.records().size() == entries.size();
    for (const auto& entry : entries) {
      const auto* record = opened.find(entry.spec.name);
      if (!record || record->dtype != entry.spec.dtype || record->shape != entry.spec.shape ||
          read_raw(opened, *record) != entry.data) {
        read_ok = false;
        continue;
      }
      reread.push_back({entry.spec, read_raw(opened, *record)});
    }
    if (!read_ok) {
      ++read_failures;
      if (first_failure.empty()) first_failure = "case " + std::to_string(round) + " read back differently";
      continue;
    }
    write_checkpoint(reread, second, opened.metadata(), WriteMode::overwrite);
    if (!same_bytes(first, second)) {
      ++rewrite_failures;
      if (first_failure.empty()) first_failure = "case " + std::to_string(round) + " rewrite differs";
    }
    std::shuffle(entries.begin(), entries.end(), rng);
    write_checkpoint(entries, shuffled, metadata, WriteMode::overwrite);
    if (!same_bytes(first, shuffled)) {
      ++order_failures;
      if (first_failure.empty()) first_failure = "case " + std::to_string(round) + " depends on entry order";
    }
  }
  const auto cases = std::to_string(options.roundtrip_cases) + " cases";
  out.push_back(boolean_check(S, "write -> open -> read is bit-exact", read_failures == 0,
                              read_failures ? first_failure : cases));
  out.push_back(boolean_check(S, "write -> open -> write is byte-identical", rewrite_failures == 0,
                              rewrite_failures ? first_failure : cases));
  out.push_back(boolean_check(S, "equal content in any entry order serializes identically", order_failures == 0,
                              order_failures ? first_failure : cases));

  SynthSpec spec;
  spec.seed = seed;
  spec.layout = model_layout(seed);
  gen_checkpoint(spec, dir / "gen_a");
  gen_checkpoint(spec, dir / "gen_b");
  spec.seed = seed + 1;
  gen_checkpoint(spec, dir / "gen_c");
  out.push_back(boolean_check(S, "gen_checkpoint is deterministic per seed",
                              same_bytes(dir / "gen_a", dir / "gen_b") && !same_bytes(dir / "gen_a", dir / "gen_c")));
}

inline Report run_invariants(std::span<const Suite> suites, std::uint64_t seed, const RunnerOptions& options = {}) {
  Report report;
  report.seed = seed;
  for (auto suite : suites) {
    const std::function<void(std::uint64_t, const RunnerOptions&, std::vector<Check>&)> run =
        suite == Suite::endpoints     ? run_endpoints
        : suite == Suite::linearity   ? run_linearity
        : suite == Suite::equivalence ? run_equivalence
        : suite == Suite::sparsify    ? run_sparsify
                                      : run_roundtrip;
    try {
      run(seed, options, report.checks);
    } catch (const std::exception& e) {
      report.checks.push_back(boolean_check(suite, "suite completed", false, e.what()));
    }
  }
  return report;
}

inline Report run_invariants(Suite suite, std::uint64_t seed, const RunnerOptions& options = {}) {
  return run_invariants(std::span<const Suite>(&suite, 1), seed, options);
}

}  // namespace patchkit::testkit
