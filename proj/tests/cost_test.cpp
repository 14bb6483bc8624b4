#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "patchkit/cost.hpp"

namespace patchkit {
namespace {

// Science setting: five SciRIFF subsamples halving down from the full
// 61,349 examples, |G| = 275,464, batch 128, one epoch.
const std::vector<std::uint64_t> kScienceSizes = {3834, 7668, 15337, 30674, 61349};
constexpr std::uint64_t kTulu = 275464;

TEST(TrainingSteps, CeilOfExamplesTimesEpochsOverBatch) {
  EXPECT_EQ(training_steps(128, 128, 1), 1u);
  EXPECT_EQ(training_steps(129, 128, 1), 2u);
  EXPECT_EQ(training_steps(61349, 128, 1), 480u);
  EXPECT_EQ(training_steps(61349, 128, 2), 959u);
  EXPECT_EQ(training_steps(1, 1, 1), 1u);
  EXPECT_THROW(training_steps(10, 0, 1), Error);
  EXPECT_THROW(training_steps(10, 1, 0), Error);
  EXPECT_THROW(training_steps(UINT64_MAX, 1, 2), Error);
}

TEST(CostSteps, ContinuedFinetuningExample) {
  const auto report = cost_steps(TrainingMethod::cft, {128, 256}, 0, 128, 1);
  EXPECT_EQ(report.total_steps, 3u);
  EXPECT_EQ(report.method, TrainingMethod::cft);
  EXPECT_EQ(report.subsample_sizes, (std::vector<std::uint64_t>{128, 256}));
}

TEST(CostSteps, RetrainingExample) {
  EXPECT_EQ(cost_steps(TrainingMethod::rt, {128, 256}, 1280, 128, 1).total_steps, 23u);
}

TEST(CostSteps, ParallelTrainThenMergeUsesFullData) {
  EXPECT_EQ(cost_steps(TrainingMethod::ptm, {128, 256}, 0, 128, 1).total_steps, 2u);
  EXPECT_EQ(cost_steps(TrainingMethod::ptm, kScienceSizes, kTulu, 128, 1).total_steps, 480u);
}

TEST(CostSteps, Errors) {
  EXPECT_THROW(cost_steps(TrainingMethod::cft, {}, 0, 128, 1), Error);
  EXPECT_THROW(cost_steps(TrainingMethod::cft, {5, 0}, 0, 128, 1), Error);
  EXPECT_THROW(cost_steps(TrainingMethod::rt, {5}, 0, 128, 1), Error);
  EXPECT_THROW(cost_steps(TrainingMethod::ptm, {5}, 0, 0, 1), Error);
}

TEST(CostSteps, ScienceSettingRatio) {
  const auto c = compare_costs(kScienceSizes, kTulu, 128, 1);
  EXPECT_EQ(c.cft.total_steps, 930u);
  EXPECT_EQ(c.rt.total_steps, 11695u);
  EXPECT_EQ(c.ptm.total_steps, 480u);
  EXPECT_NEAR(c.ptm_over_rt(), 479.0 / 11766.0, 0.01);
  EXPECT_LT(c.ptm.total_steps, c.cft.total_steps);
  EXPECT_LT(c.cft.total_steps, c.rt.total_steps);
}

TEST(CostSteps, RatioIndependentOfEpochsToFirstOrder) {
  const auto one = compare_costs(kScienceSizes, kTulu, 128, 1);
  const auto two = compare_costs(kScienceSizes, kTulu, 128, 2);
  EXPECT_NEAR(one.ptm_over_rt(), two.ptm_over_rt(), 1e-3);
}

TEST(CostSteps, MonotoneAndOrderedOnRandomInstances) {
  std::mt19937_64 rng(17);
  for (int round = 0; round < 2000; ++round) {
    std::vector<std::uint64_t> sizes(1 + rng() % 6);
    for (auto& s : sizes) s = 1 + rng() % 100000;
    const std::uint64_t general = 1 + rng() % 1000000;
    const std::uint64_t batch = 1 + rng() % 256;
    const std::uint64_t epochs = 1 + rng() % 3;
    const auto c = compare_costs(sizes, general, batch, epochs);
    ASSERT_LE(c.ptm.total_steps, c.cft.total_steps);
    ASSERT_LE(c.cft.total_steps, c.rt.total_steps);

    auto bigger = sizes;
    bigger[rng() % bigger.size()] += 1 + rng() % 1000;
    const auto grown = compare_costs(bigger, general + rng() % 1000, batch, epochs);
    ASSERT_GE(grown.cft.total_steps, c.cft.total_steps);
    ASSERT_GE(grown.rt.total_steps, c.rt.total_steps);
    ASSERT_GE(grown.ptm.total_steps, c.ptm.total_steps);
    const auto more_epochs = compare_costs(sizes, general, batch, epochs + 1);
    ASSERT_GE(more_epochs.rt.total_steps, c.rt.total_steps);
  }
}

TEST(TrainingMethodNames, ParseIsCaseInsensitive) {
  EXPECT_EQ(parse_training_method("PTM"), TrainingMethod::ptm);
  EXPECT_EQ(parse_training_method("cft"), TrainingMethod::cft);
  EXPECT_EQ(parse_training_method("Rt"), TrainingMethod::rt);
  EXPECT_FALSE(parse_training_method("soup"));
}

}  // namespace
}  // namespace patchkit
