#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "patchkit/sparsify.hpp"
#include "patchkit/synth.hpp"
#include "test_util.hpp"

namespace patchkit {
namespace {

using test::slurp;
using test::TempDir;

std::vector<float> trimmed(std::vector<float> v, double density) {
  ties_trim_inplace(v, density);
  return v;
}

std::vector<float> ties_of(std::vector<std::vector<float>> vectors, double density = 1.0) {
  return ties_merge_tensor(std::move(vectors), density);
}

TaskVector vector_file(const std::filesystem::path& path, const std::vector<float>& values) {
  return TaskVector(write_checkpoint(std::vector{make_entry("w", DType::F32, {values.size()}, values)}, path,
                                     {{"role", "task_vector"}, {"minuend", "m"}, {"subtrahend", "b"}}));
}

TEST(TrimCount, CeilWithIntegerSnap) {
  EXPECT_EQ(trim_count(4, 0.5), 2u);
  EXPECT_EQ(trim_count(1000, 0.2), 200u);
  EXPECT_EQ(trim_count(10, 0.7), 7u);
  EXPECT_EQ(trim_count(3, 0.5), 2u);
  EXPECT_EQ(trim_count(7, 0.01), 1u);
  EXPECT_EQ(trim_count(0, 0.3), 0u);
  EXPECT_EQ(trim_count(5, 1.0), 5u);
}

TEST(TiesTrim, KeepsTopMagnitudes) {
  EXPECT_EQ(trimmed({3, -1, 2, 0}, 0.5), (std::vector<float>{3, 0, 2, 0}));
  EXPECT_EQ(trimmed({3, -1, 2, 0}, 1.0), (std::vector<float>{3, -1, 2, 0}));
  EXPECT_EQ(trimmed({-4, 1, 2, -3}, 0.25), (std::vector<float>{-4, 0, 0, 0}));
}

TEST(TiesTrim, ThresholdTiesKeepLowerIndex) {
  EXPECT_EQ(trimmed({1, -1, 1, 1}, 0.5), (std::vector<float>{1, -1, 0, 0}));
  EXPECT_EQ(trimmed({0.5f, 2, -2, 2, 0.1f}, 0.4), (std::vector<float>{0, 2, -2, 0, 0}));
}

TEST(TiesTrim, RejectsInvalidDensity) {
  std::vector<float> v = {1, 2};
  EXPECT_THROW(ties_trim_inplace(v, 0.0), Error);
  EXPECT_THROW(ties_trim_inplace(v, 1.5), Error);
}

TEST(TiesTrim, MatchesFullSortOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> normal;
  std::vector<float> v(1000);
  for (auto& x : v) x = normal(rng);
  const auto out = trimmed(v, 0.2);
  EXPECT_EQ(std::count_if(out.begin(), out.end(), [](float x) { return x != 0.0f; }), 200);
  EXPECT_EQ(out, oracle::trim_by_sort(v, 200));
}

TEST(TiesTrim, PropertiesOnRandomInputs) {
  std::mt19937_64 rng(8);
  for (int round = 0; round < 200; ++round) {
    const std::size_t n = 1 + rng() % 300;
    std::vector<float> v(n);
    // coarse values so threshold ties are common
    for (auto& x : v) x = static_cast<float>(static_cast<int>(rng() % 9) - 4);
    const double density = 0.01 + 0.99 * std::uniform_real_distribution<double>()(rng);
    const auto out = trimmed(v, density);
    EXPECT_EQ(out, oracle::trim_by_sort(v, trim_count(n, density)));
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LE(std::fabs(out[i]), std::fabs(v[i]));
      EXPECT_TRUE(out[i] == 0.0f || out[i] == v[i]);
    }
  }
}

TEST(TiesMerge, HandEnumeratedSignElection) {
  // mass 2 - 1 = 1 > 0: mean over {2}
  EXPECT_EQ(ties_of({{2}, {-1}}), std::vector<float>{2});
  // mass 1 + 1 - 5 = -3 < 0: mean over {-5}
  EXPECT_EQ(ties_of({{1}, {1}, {-5}}), std::vector<float>{-5});
  // zero mass: element dropped
  EXPECT_EQ(ties_of({{1}, {-1}}), std::vector<float>{0});
  // agreeing contributions are averaged, zeros excluded from the count
  EXPECT_EQ(ties_of({{2, 0}, {4, 0}, {-1, 0}}), (std::vector<float>{3, 0}));
}

TEST(TiesMerge, SingleVectorAtFullDensityIsIdentity) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> normal;
  std::vector<float> v(513);
  for (auto& x : v) x = normal(rng);
  EXPECT_EQ(ties_of({v}), v);
}

TEST(TiesMerge, WholeVectorsScaleBeforeTrimming) {
  TempDir dir;
  const auto a = vector_file(dir / "a", {2, 1, 0, -3});
  const auto b = vector_file(dir / "b", {-1, 4, 1, 1});
  // weights: a*1 = [2,1,0,-3], b*0.5 = [-0.5,2,0.5,0.5]; density 0.5 keeps
  // a -> [2,0,0,-3], b -> [-0.5,2,0,0] (0.5-magnitude tie keeps index 0);
  // element 0 has mass 1.5 so only a's 2 counts
  const std::vector<WeightedVector> inputs = {{a, 1.0}, {b, 0.5}};
  const auto merged = ties_merge(inputs, 0.5, dir / "m");
  EXPECT_EQ(merged.read("w"), (std::vector<float>{2, 2, 0, -3}));
  EXPECT_EQ(merged.stored()->metadata().at("ties_density"), "0.5");

  const std::vector<WeightedVector> reversed = {{b, 0.5}, {a, 1.0}};
  ties_merge(reversed, 0.5, dir / "r");
  EXPECT_EQ(slurp(dir / "m"), slurp(dir / "r"));
}

TEST(TiesMerge, WholeVectorTrimWritesTaskVector) {
  TempDir dir;
  const auto v = vector_file(dir / "v", {3, -1, 2, 0});
  const auto out = ties_trim(v, 0.5, dir / "t");
  EXPECT_EQ(out.read("w"), (std::vector<float>{3, 0, 2, 0}));
  EXPECT_EQ(out.minuend_id(), "m");
  EXPECT_EQ(out.subtrahend_id(), "b");
}

TEST(Dare, ZeroDropIsIdentity) {
  std::vector<float> v = {1.5f, -2, 0.25f};
  const auto copy = v;
  dare_inplace(v, {0.0, 9}, "w");
  EXPECT_EQ(v, copy);
}

TEST(Dare, ZeroVectorStaysZero) {
  std::vector<float> v(1000, 0.0f);
  dare_inplace(v, {0.7, 3}, "w");
  EXPECT_TRUE(std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; }));
}

TEST(Dare, RejectsDropOfOne) {
  std::vector<float> v = {1};
  EXPECT_THROW(dare_inplace(v, {1.0, 0}, "w"), Error);
  EXPECT_THROW(dare_inplace(v, {-0.1, 0}, "w"), Error);
}

TEST(Dare, MonteCarloBoundsAtNinetyPercent) {
  std::vector<float> v(1'000'000, 1.0f);
  dare_inplace(v, {0.9, 5}, "w");
  double sum = 0;
  std::size_t nonzero = 0;
  for (float x : v) {
    sum += x;
    nonzero += x != 0.0f;
    ASSERT_TRUE(x == 0.0f || x == 10.0f);
  }
  const double mean = sum / static_cast<double>(v.size());
  const double fraction = static_cast<double>(nonzero) / static_cast<double>(v.size());
  EXPECT_GE(mean, 0.99);
  EXPECT_LE(mean, 1.01);
  EXPECT_GE(fraction, 0.099);
  EXPECT_LE(fraction, 0.101);
}

TEST(Dare, DeterministicPerSeedAndName) {
  std::vector<float> a(4096, 1.0f), b(4096, 1.0f), c(4096, 1.0f), d(4096, 1.0f);
  dare_inplace(a, {0.5, 5}, "layer.0");
  dare_inplace(b, {0.5, 5}, "layer.0");
  dare_inplace(c, {0.5, 6}, "layer.0");
  dare_inplace(d, {0.5, 5}, "layer.1");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a, d);
}

TEST(Dare, UnbiasedAcrossSeeds) {
  const std::vector<float> x = {1.0f, -2.0f, 0.5f, 3.0f, -0.125f, 7.0f, 0.0f, -1.0f};
  for (double p : {0.5, 0.9}) {
    std::vector<double> sums(x.size(), 0.0);
    constexpr int kSeeds = 1000;
    for (int seed = 0; seed < kSeeds; ++seed) {
      auto v = x;
      dare_inplace(v, {p, static_cast<std::uint64_t>(seed)}, "w");
      for (std::size_t i = 0; i < v.size(); ++i) sums[i] += v[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double mean = sums[i] / kSeeds;
      // per-draw sd of x*Bernoulli(1-p)/(1-p) is |x|*sqrt(p/(1-p))
      const double stderr_ = std::fabs(x[i]) * std::sqrt(p / (1 - p)) / std::sqrt(double(kSeeds));
      EXPECT_LE(std::fabs(mean - x[i]), 5 * stderr_ + 1e-12) << "p=" << p << " i=" << i;
    }
  }
}

TEST(Dare, WholeVectorSerialAndParallelAgree) {
  TempDir dir;
  SynthSpec spec;
  spec.seed = 12;
  spec.metadata = {{"role", "task_vector"}};
  for (int i = 0; i < 10; ++i) spec.layout.push_back({"t" + std::to_string(i), DType::F32, {1000}});
  const TaskVector v(gen_checkpoint(spec, dir / "v"));
  dare(v, {0.9, 5}, dir / "serial", {WriteMode::fail_if_exists, 1});
  dare(v, {0.9, 5}, dir / "parallel", {WriteMode::fail_if_exists, 8});
  EXPECT_EQ(slurp(dir / "serial"), slurp(dir / "parallel"));
  const auto out = TaskVector::open(dir / "serial");
  EXPECT_EQ(out.stored()->metadata().at("dare_seed"), "5");
}

}  // namespace
}  // namespace patchkit
