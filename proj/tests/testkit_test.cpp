#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "patchkit/testkit.hpp"
#include "test_util.hpp"

namespace patchkit {
namespace {

using test::slurp;
using test::TempDir;

TEST(GenCheckpoint, ConstantZeroIsAllZero) {
  TempDir dir;
  SynthSpec spec;
  spec.layout = {{"a", DType::F32, {10, 3}}, {"b", DType::BF16, {7}}, {"c", DType::F16, {}}};
  spec.distribution = Constant{0.0f};
  const auto m = gen_checkpoint(spec, dir / "zero");
  for (const auto& record : m.records()) {
    const auto values = read_values(m, record);
    EXPECT_TRUE(std::all_of(values.begin(), values.end(), [](float x) { return x == 0.0f; })) << record.name;
  }
}

TEST(GenCheckpoint, SameSeedSameBytesDifferentSeedDifferentData) {
  TempDir dir;
  SynthSpec spec;
  spec.layout = {{"w", DType::F32, {256}}, {"ids", DType::I64, {8}}, {"mask", DType::BOOL, {8}}};
  spec.seed = 1;
  gen_checkpoint(spec, dir / "a");
  gen_checkpoint(spec, dir / "b");
  spec.seed = 2;
  gen_checkpoint(spec, dir / "c");
  EXPECT_EQ(slurp(dir / "a"), slurp(dir / "b"));
  const auto a = open_checkpoint(dir / "a");
  const auto c = open_checkpoint(dir / "c");
  EXPECT_TRUE(std::ranges::equal(a.records(), c.records()));
  EXPECT_NE(read_raw(a, a.at("w")), read_raw(c, c.at("w")));
}

TEST(GenCheckpoint, UniformValuesAreOnTheGrid) {
  TempDir dir;
  SynthSpec spec;
  spec.layout = {{"w", DType::F32, {100000}}};
  const auto m = gen_checkpoint(spec, dir / "u");
  const auto values = read_values(m, m.at("w"));
  double sum = 0;
  for (float x : values) {
    ASSERT_GE(x, -1.0f);
    ASSERT_LT(x, 1.0f);
    const double scaled = static_cast<double>(x) * 0x1p23;
    ASSERT_EQ(scaled, std::floor(scaled));
    sum += x;
  }
  EXPECT_NEAR(sum / values.size(), 0.0, 0.01);
}

TEST(GenCheckpoint, GaussianMoments) {
  TempDir dir;
  SynthSpec spec;
  spec.layout = {{"w", DType::F32, {200000}}};
  spec.distribution = Gaussian{};
  const auto m = gen_checkpoint(spec, dir / "g");
  const auto values = read_values(m, m.at("w"));
  double sum = 0, sq = 0;
  for (float x : values) {
    sum += x;
    sq += static_cast<double>(x) * x;
  }
  const double mean = sum / values.size();
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq / values.size() - mean * mean, 1.0, 0.02);
}

class SuiteTest : public ::testing::TestWithParam<testkit::Suite> {};

TEST_P(SuiteTest, PassesOnSeveralSeeds) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto report = testkit::run_invariants(GetParam(), seed);
    EXPECT_FALSE(report.checks.empty());
    EXPECT_TRUE(report.passed()) << report.text();
  }
}

INSTANTIATE_TEST_SUITE_P(AllSuites, SuiteTest, ::testing::ValuesIn(testkit::kAllSuites),
                         [](const auto& info) { return std::string(testkit::suite_name(info.param)); });

TEST(RunInvariants, DocumentedBounds) {
  const auto endpoints = testkit::run_invariants(testkit::Suite::endpoints, 5);
  EXPECT_EQ(endpoints.max_ulp(), 0.0);
  const auto linearity = testkit::run_invariants(testkit::Suite::linearity, 5);
  EXPECT_LE(linearity.max_ulp(), 4.0);
  const auto equivalence = testkit::run_invariants(testkit::Suite::equivalence, 5);
  EXPECT_LE(equivalence.max_ulp(), 1.0);
}

TEST(RunInvariants, DeterministicGivenSeed) {
  const auto a = testkit::run_invariants(std::span<const testkit::Suite>(testkit::kAllSuites), 123);
  const auto b = testkit::run_invariants(std::span<const testkit::Suite>(testkit::kAllSuites), 123);
  EXPECT_EQ(a.text(), b.text());
  EXPECT_EQ(a.json(), b.json());
}

TEST(RunInvariants, JsonReport) {
  const auto report = testkit::run_invariants(testkit::Suite::endpoints, 3);
  const auto json = report.json();
  EXPECT_EQ(json["seed"], 3);
  EXPECT_EQ(json["passed"], true);
  ASSERT_EQ(json["checks"].size(), report.checks.size());
  for (const auto& check : json["checks"]) {
    EXPECT_EQ(check["suite"], "endpoints");
    EXPECT_TRUE(check["max_ulp"].is_number());
    EXPECT_TRUE(check["passed"].get<bool>());
  }
}

TEST(RunInvariants, FailedCheckShowsInReport) {
  testkit::Report report;
  report.checks.push_back(testkit::numeric_check(testkit::Suite::linearity, "made up", 7, 4));
  EXPECT_FALSE(report.passed());
  EXPECT_NE(report.text().find("FAIL"), std::string::npos);
  EXPECT_EQ(report.json()["passed"], false);
}

TEST(Suites, NamesRoundTrip) {
  for (auto suite : testkit::kAllSuites) EXPECT_EQ(testkit::parse_suite(testkit::suite_name(suite)), suite);
  EXPECT_FALSE(testkit::parse_suite("everything"));
}

}  // namespace
}  // namespace patchkit
