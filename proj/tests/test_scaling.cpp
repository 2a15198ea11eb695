#include <gtest/gtest.h>

#include "oracles.hpp"
#include "topkd/scaling.hpp"

using topkd::IndexVector;
using topkd::Matrix;
using topkd::RandomStream;
using topkd::ScaledLogits;
using topkd::ScalingSpec;

TEST(RankWeights, SingleRankGetsFullAmplitude) {
  const auto w = topkd::rank_weights(1, 0.5);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_DOUBLE_EQ(w[0], 1.5);
}

TEST(RankWeights, GammaZeroDisables) {
  const auto w = topkd::rank_weights(2, 0.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
}

TEST(RankWeights, LinearSchedule) {
  const auto w = topkd::rank_weights(4, 1.0);
  const std::vector<double> want{2.0, 1.75, 1.5, 1.25};
  ASSERT_EQ(w.size(), want.size());
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_DOUBLE_EQ(w[i], want[i]);
}

TEST(RankWeights, DecreasingAndAtLeastOne) {
  RandomStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(12);
    const double gamma = rng.uniform(0.0, 3.0);
    const auto w = topkd::rank_weights(k, gamma);
    for (std::size_t r = 0; r < k; ++r) {
      EXPECT_GE(w[r], 1.0);
      if (r > 0 && gamma > 0.0) EXPECT_LT(w[r], w[r - 1]);
    }
  }
}

TEST(BiasDelta, UniformRowGivesZero) {
  const std::vector<double> row{1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(topkd::bias_delta(row, {0, 1}, 1.0), 0.0);
}

TEST(BiasDelta, HandComputedMeans) {
  const std::vector<double> row{4, 2, 0, -2};
  EXPECT_DOUBLE_EQ(topkd::bias_delta(row, {0, 1}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(topkd::bias_delta(row, {0, 1}, 0.5), 2.0);
}

TEST(BiasDelta, EmptyComplementThrows) {
  const std::vector<double> row{1, 2};
  EXPECT_THROW(topkd::bias_delta(row, {0, 1}, 1.0), std::invalid_argument);
}

TEST(BiasDelta, NonNegativeOnTopkSelection) {
  RandomStream rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> row(12);
    for (auto& v : row) v = rng.uniform(-5, 5);
    const auto top = topkd::topk_indices(row, 4);
    EXPECT_GE(topkd::bias_delta(row, top, rng.uniform(0.0, 2.0)), 0.0);
  }
}

namespace {

ScalingSpec demo_spec() {
  ScalingSpec spec;
  spec.k = 2;
  spec.gamma = 1.0;
  spec.lambda = 1.0;
  spec.gt_boost = 2.0;
  spec.enabled = true;
  return spec;
}

}  // namespace

TEST(ApplyTsm, TeacherCorrectRow) {
  // I_top = {0,1}, delta = (2 - (-0.5)) = 2.5; label 0 is the argmax, so the
  // ground truth keeps its plain rank weight.
  const Matrix teacher = Matrix::from_rows({{3, 1, 0, -1}});
  const ScaledLogits out = topkd::apply_tsm(teacher, {0}, demo_spec());
  EXPECT_DOUBLE_EQ(out.values(0, 0), 8.5);
  EXPECT_DOUBLE_EQ(out.values(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(out.values(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(out.values(0, 3), -1.0);
  EXPECT_TRUE(out.modified(0, 0));
  EXPECT_TRUE(out.modified(0, 1));
  EXPECT_FALSE(out.modified(0, 2));
  EXPECT_FALSE(out.modified(0, 3));
}

TEST(ApplyTsm, TeacherWrongBoostsGroundTruth) {
  const Matrix teacher = Matrix::from_rows({{3, 1, 0, -1}});
  const ScaledLogits out = topkd::apply_tsm(teacher, {3}, demo_spec());
  EXPECT_DOUBLE_EQ(out.values(0, 0), 8.5);
  EXPECT_DOUBLE_EQ(out.values(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(out.values(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(out.values(0, 3), -1.5);  // (-1) * (2 * 2) + 2.5
  EXPECT_TRUE(out.modified(0, 3));
  EXPECT_FALSE(out.modified(0, 2));
}

TEST(ApplyTsm, AllScalingDisabledIsIdentity) {
  ScalingSpec spec = demo_spec();
  spec.gamma = 0.0;
  spec.lambda = 0.0;
  spec.gt_boost = 1.0;
  RandomStream rng(5);
  const Matrix teacher = oracles::random_matrix(rng, 4, 6);
  IndexVector labels{0, 5, 2, 3};
  const ScaledLogits out = topkd::apply_tsm(teacher, labels, spec);
  for (std::size_t i = 0; i < teacher.data().size(); ++i) {
    EXPECT_DOUBLE_EQ(out.values.data()[i], teacher.data()[i]);
  }
}

TEST(ApplyTsm, DisabledModulePassesThroughWithEmptyMask) {
  ScalingSpec spec = demo_spec();
  spec.enabled = false;
  const Matrix teacher = Matrix::from_rows({{3, 1, 0, -1}});
  const ScaledLogits out = topkd::apply_tsm(teacher, {0}, spec);
  for (std::size_t i = 0; i < teacher.data().size(); ++i) {
    EXPECT_EQ(out.values.data()[i], teacher.data()[i]);
    EXPECT_EQ(out.modified_mask[i], 0);
  }
}

TEST(ApplyTsm, MatchesScalarOracleBitwise) {
  RandomStream rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 6 + rng.uniform_index(10);
    const std::size_t b = 1 + rng.uniform_index(5);
    ScalingSpec spec;
    spec.k = 1 + rng.uniform_index(c / 2);
    spec.gamma = rng.uniform(0.0, 2.0);
    spec.lambda = rng.uniform(0.0, 2.0);
    spec.gt_boost = 1.0 + rng.uniform(0.0, 2.0);

    const Matrix teacher = oracles::random_matrix(rng, b, c);
    IndexVector labels;
    for (std::size_t i = 0; i < b; ++i) labels.push_back(rng.uniform_index(c));

    const ScaledLogits got = topkd::apply_tsm(teacher, labels, spec);
    const Matrix want = oracles::tsm_scalar_oracle(teacher, labels, spec);
    for (std::size_t i = 0; i < want.data().size(); ++i) {
      EXPECT_EQ(got.values.data()[i], want.data()[i]) << "trial " << trial << " entry " << i;
    }
  }
}

TEST(ApplyTsm, UntouchedEntriesBitwiseEqualAndMaskCountCorrect) {
  RandomStream rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    ScalingSpec spec = demo_spec();
    spec.k = 3;
    const Matrix teacher = oracles::random_matrix(rng, 4, 9);
    IndexVector labels;
    for (std::size_t i = 0; i < 4; ++i) labels.push_back(rng.uniform_index(9));

    const ScaledLogits out = topkd::apply_tsm(teacher, labels, spec);
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t touched = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        if (out.modified(i, j)) {
          ++touched;
        } else {
          EXPECT_EQ(out.values(i, j), teacher(i, j));
        }
      }
      EXPECT_TRUE(touched == spec.k || touched == spec.k + 1);
    }
  }
}

TEST(ApplyTsm, DeltaZeroOnlyForConstantRows) {
  const Matrix constant = Matrix::from_rows({{2, 2, 2, 2, 2, 2}});
  const std::vector<double> row{2, 2, 2, 2, 2, 2};
  const auto top = topkd::topk_indices(row, 2);
  EXPECT_DOUBLE_EQ(topkd::bias_delta(row, top, 1.5), 0.0);
}

TEST(ApplyTsm, TopkOrderPreservedWhenLogitsNonNegativeAndTeacherCorrect) {
  RandomStream rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    ScalingSpec spec = demo_spec();
    spec.k = 3;
    Matrix teacher = oracles::random_matrix(rng, 1, 8, 0.0, 5.0);
    const auto row = teacher.row(0);
    const IndexVector top = topkd::topk_indices(row, spec.k);
    const IndexVector labels{top[0]};  // teacher top-1 correct

    const ScaledLogits out = topkd::apply_tsm(teacher, labels, spec);
    for (std::size_t r = 1; r < top.size(); ++r) {
      EXPECT_GE(out.values(0, top[r - 1]), out.values(0, top[r]));
    }
  }
}

TEST(ApplyTsm, ErrorPaths) {
  const Matrix teacher(2, 4);
  ScalingSpec spec = demo_spec();
  spec.k = 3;  // 2k > C
  EXPECT_THROW(topkd::apply_tsm(teacher, {0, 1}, spec), std::invalid_argument);

  spec.k = 2;
  EXPECT_THROW(topkd::apply_tsm(teacher, {0, 4}, spec), std::out_of_range);
  EXPECT_THROW(topkd::apply_tsm(teacher, {0}, spec), std::invalid_argument);

  ScalingSpec bad = demo_spec();
  bad.gt_boost = 0.5;
  EXPECT_THROW(topkd::apply_tsm(teacher, {0, 1}, bad), std::invalid_argument);
}
