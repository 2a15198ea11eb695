#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "topkd/grad_check.hpp"
#include "topkd/losses.hpp"

using topkd::IndexVector;
using topkd::LossOutput;
using topkd::Matrix;
using topkd::RandomStream;
using topkd::ScalingSpec;
using topkd::TdlSpec;

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kGradTol = 1e-5;

// Random teacher-style matrix whose rows have no near-ties, so top-k /
// bottom-k selections sit away from slice boundaries.
Matrix random_matrix_no_ties(RandomStream& rng, std::size_t rows, std::size_t cols) {
  while (true) {
    Matrix m = oracles::random_matrix(rng, rows, cols);
    bool ok = true;
    for (std::size_t i = 0; i < rows && ok; ++i) {
      std::vector<double> sorted(m.row(i).begin(), m.row(i).end());
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t j = 1; j < sorted.size(); ++j) {
        if (sorted[j] - sorted[j - 1] < 1e-3) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return m;
  }
}

TdlSpec tdl_spec(std::size_t k, double alpha = 3.0, double beta = 1.0) {
  TdlSpec spec;
  spec.k = k;
  spec.alpha = alpha;
  spec.beta = beta;
  return spec;
}

}  // namespace

TEST(FiniteDifference, QuadraticAndLinear) {
  RandomStream rng(21);
  const Matrix x = oracles::random_matrix(rng, 3, 4);
  const Matrix c = oracles::random_matrix(rng, 3, 4);

  const Matrix gq = topkd::finite_difference_grad(
      [](const Matrix& m) {
        double acc = 0.0;
        for (double v : m.data()) acc += 0.5 * v * v;
        return acc;
      },
      x, 1e-5);
  EXPECT_LT(oracles::max_rel_error(gq, x), 1e-8);

  const Matrix gl = topkd::finite_difference_grad(
      [&](const Matrix& m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.data().size(); ++i) acc += c.data()[i] * m.data()[i];
        return acc;
      },
      x, 1e-5);
  EXPECT_LT(oracles::max_rel_error(gl, c), 1e-9);
}

TEST(Contrastive, SingleSampleBatchIsZero) {
  const Matrix s = Matrix::from_rows({{1.0, -2.0, 0.5}});
  const Matrix t = Matrix::from_rows({{0.3, 0.4, -1.0}});
  const LossOutput out = topkd::contrastive_loss(s, t, 0.07);
  EXPECT_DOUBLE_EQ(out.value, 0.0);
  for (double g : out.grad_student.data()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Contrastive, SymmetricUnderSwap) {
  RandomStream rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracles::random_matrix(rng, 5, 7);
    const Matrix b = oracles::random_matrix(rng, 5, 7);
    EXPECT_EQ(topkd::contrastive_loss(a, b, 0.5).value,
              topkd::contrastive_loss(b, a, 0.5).value);
  }
}

TEST(Contrastive, NonNegative) {
  RandomStream rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = oracles::random_matrix(rng, 4, 6);
    const Matrix b = oracles::random_matrix(rng, 4, 6);
    EXPECT_GE(topkd::contrastive_loss(a, b, 0.07).value, 0.0);
  }
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  RandomStream rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 4, 6, -1.0, 1.0);
    const Matrix t = oracles::random_matrix(rng, 4, 6, -1.0, 1.0);
    const LossOutput out = topkd::contrastive_loss(s, t, 0.07);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) { return topkd::contrastive_loss(m, t, 0.07).value; }, s,
        kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(Contrastive, GradientMatchesFiniteDifferencesNormalized) {
  RandomStream rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 4, 6);
    const Matrix t = oracles::random_matrix(rng, 4, 6);
    const LossOutput out = topkd::contrastive_loss(s, t, 0.07, /*normalize=*/true);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) { return topkd::contrastive_loss(m, t, 0.07, true).value; },
        s, kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(Contrastive, BadTauThrows) {
  const Matrix m(2, 3);
  EXPECT_THROW(topkd::contrastive_loss(m, m, 0.0), std::invalid_argument);
  EXPECT_THROW(topkd::contrastive_loss(m, m, -1.0), std::invalid_argument);
}

TEST(TdlPartition, ForcedOrdering) {
  const std::vector<double> row{5, 3, 0, -1, -4, 1};
  const auto part = topkd::tdl_partition(row, 2);
  EXPECT_EQ(part.pos, (IndexVector{0, 1}));
  EXPECT_EQ(part.neg, (IndexVector{4, 3}));
  EXPECT_EQ(part.non, (IndexVector{2, 5}));
}

TEST(TdlPartition, ConstantRowTieBreak) {
  const std::vector<double> row{1, 1, 1, 1, 1};
  const auto part = topkd::tdl_partition(row, 1);
  EXPECT_EQ(part.pos, (IndexVector{0}));
  EXPECT_EQ(part.neg, (IndexVector{1}));
  EXPECT_EQ(part.non, (IndexVector{2, 3, 4}));
}

TEST(TdlPartition, MatchesFullSortOracle) {
  RandomStream rng(26);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> row(100);
    for (auto& v : row) v = rng.uniform(-10, 10);
    const auto part = topkd::tdl_partition(row, 10);
    IndexVector pos, neg, non;
    oracles::tdl_partition_by_full_sort(row, 10, pos, neg, non);
    EXPECT_EQ(part.pos, pos);
    EXPECT_EQ(part.neg, neg);
    EXPECT_EQ(part.non, non);
  }
}

TEST(TdlPartition, CoversAllIndicesDisjointly) {
  RandomStream rng(27);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> row(11);
    for (auto& v : row) v = rng.uniform(-2, 2);
    const auto part = topkd::tdl_partition(row, 4);
    std::vector<int> seen(row.size(), 0);
    for (std::size_t i : part.pos) seen[i]++;
    for (std::size_t i : part.neg) seen[i]++;
    for (std::size_t i : part.non) seen[i]++;
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(TdlPartition, TwoKGreaterThanCThrows) {
  const std::vector<double> row{1, 2, 3};
  EXPECT_THROW(topkd::tdl_partition(row, 2), std::invalid_argument);
}

TEST(TdlLoss, PerfectAlignmentHitsMinimum) {
  RandomStream rng(28);
  const Matrix t = random_matrix_no_ties(rng, 3, 10);
  const LossOutput out = topkd::tdl_loss(t, t, tdl_spec(3));
  EXPECT_NEAR(out.value, 1.0 - 5.0, 1e-12);
}

TEST(TdlLoss, AntiAlignmentHitsMaximum) {
  RandomStream rng(29);
  const Matrix t = random_matrix_no_ties(rng, 3, 10);
  Matrix s = t;
  for (double& v : s.data()) v = -v;
  const LossOutput out = topkd::tdl_loss(s, t, tdl_spec(3));
  EXPECT_NEAR(out.value, 1.0 + 5.0, 1e-12);
}

TEST(TdlLoss, BoundedForRandomInputs) {
  RandomStream rng(30);
  const TdlSpec spec = tdl_spec(3, 3.0, 1.0);
  const double amplitude = spec.alpha + spec.beta + 1.0;
  for (int trial = 0; trial < 500; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 2, 10);
    const Matrix t = oracles::random_matrix(rng, 2, 10);
    const double v = topkd::tdl_loss(s, t, spec).value;
    EXPECT_GE(v, 1.0 - amplitude);
    EXPECT_LE(v, 1.0 + amplitude);
  }
}

TEST(TdlLoss, SliceScaleInvariance) {
  RandomStream rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix t = random_matrix_no_ties(rng, 1, 10);
    Matrix s = oracles::random_matrix(rng, 1, 10);
    const TdlSpec spec = tdl_spec(3);
    const double base = topkd::tdl_loss(s, t, spec).value;

    const auto part = topkd::tdl_partition(t.row(0), spec.k);
    const double scale = rng.uniform(0.2, 5.0);
    Matrix scaled = s;
    for (std::size_t j : part.pos) scaled(0, j) *= scale;
    EXPECT_NEAR(topkd::tdl_loss(scaled, t, spec).value, base, 1e-10);
  }
}

TEST(TdlLoss, GradientMatchesFiniteDifferences) {
  RandomStream rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = random_matrix_no_ties(rng, 4, 10);
    const Matrix s = oracles::random_matrix(rng, 4, 10);
    const TdlSpec spec = tdl_spec(3);
    const LossOutput out = topkd::tdl_loss(s, t, spec);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) { return topkd::tdl_loss(m, t, spec).value; }, s, kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(TdlLoss, NoNonSliceWhenCEquals2K) {
  RandomStream rng(33);
  const Matrix t = random_matrix_no_ties(rng, 2, 6);
  const Matrix s = oracles::random_matrix(rng, 2, 6);
  const TdlSpec spec = tdl_spec(3);
  const LossOutput out = topkd::tdl_loss(s, t, spec);
  // value = 1 - mean(alpha cos + beta cos); bounded by alpha + beta
  EXPECT_GE(out.value, 1.0 - 4.0);
  EXPECT_LE(out.value, 1.0 + 4.0);
  const Matrix fd = topkd::finite_difference_grad(
      [&](const Matrix& m) { return topkd::tdl_loss(m, t, spec).value; }, s, kFdStep);
  EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol);
}

namespace {

ScalingSpec default_scaling(std::size_t k = 3) {
  ScalingSpec spec;
  spec.k = k;
  spec.gamma = 0.5;
  spec.lambda = 1.0;
  spec.gt_boost = 2.0;
  return spec;
}

}  // namespace

TEST(TopkdLoss, AdditivityWithScalingDisabled) {
  RandomStream rng(34);
  ScalingSpec scaling = default_scaling();
  scaling.enabled = false;
  const TdlSpec spec = tdl_spec(3);

  const Matrix s = oracles::random_matrix(rng, 4, 10);
  const Matrix t = random_matrix_no_ties(rng, 4, 10);
  IndexVector labels;
  for (std::size_t i = 0; i < 4; ++i) labels.push_back(rng.uniform_index(10));

  const auto combined = topkd::topkd_loss(s, t, labels, scaling, spec, 0.07);
  const auto con = topkd::contrastive_loss(s, t, 0.07);
  const auto dec = topkd::tdl_loss(s, t, spec);

  EXPECT_EQ(combined.contrastive, con.value);
  EXPECT_EQ(combined.tdl, dec.value);
  EXPECT_EQ(combined.value, con.value + dec.value);
  for (std::size_t i = 0; i < combined.grad_student.data().size(); ++i) {
    EXPECT_EQ(combined.grad_student.data()[i],
              con.grad_student.data()[i] + dec.grad_student.data()[i]);
  }
}

TEST(TopkdLoss, DegenerateComposition) {
  // B=1 with student equal to the scaled teacher: contrastive part is 0 and
  // the TDL part sits at its minimum.
  RandomStream rng(35);
  const Matrix t = random_matrix_no_ties(rng, 1, 10);
  const ScalingSpec scaling = default_scaling();
  IndexVector labels{4};
  const Matrix scaled = topkd::apply_tsm(t, labels, scaling).values;

  const auto out = topkd::topkd_loss(scaled, t, labels, scaling, tdl_spec(3), 0.07);
  EXPECT_NEAR(out.value, 0.0 + (1.0 - 5.0), 1e-12);
}

TEST(TopkdLoss, GradientMatchesFiniteDifferences) {
  RandomStream rng(36);
  const ScalingSpec scaling = default_scaling();
  const TdlSpec spec = tdl_spec(3);
  for (int trial = 0; trial < 15; ++trial) {
    const Matrix t = random_matrix_no_ties(rng, 4, 10);
    const Matrix s = oracles::random_matrix(rng, 4, 10);
    IndexVector labels;
    for (std::size_t i = 0; i < 4; ++i) labels.push_back(rng.uniform_index(10));

    const auto out = topkd::topkd_loss(s, t, labels, scaling, spec, 0.07);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) {
          return topkd::topkd_loss(m, t, labels, scaling, spec, 0.07).value;
        },
        s, kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(KdKl, SelfDivergenceIsZeroWithZeroGradient) {
  RandomStream rng(37);
  const Matrix z = oracles::random_matrix(rng, 3, 8);
  const LossOutput out = topkd::kd_kl_loss(z, z, 4.0);
  EXPECT_NEAR(out.value, 0.0, 1e-12);
  for (double g : out.grad_student.data()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(KdKl, NonNegative) {
  RandomStream rng(38);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 4, 6);
    const Matrix t = oracles::random_matrix(rng, 4, 6);
    EXPECT_GE(topkd::kd_kl_loss(s, t, 4.0).value, 0.0);
  }
}

TEST(KdKl, GradientMatchesFiniteDifferences) {
  RandomStream rng(39);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 4, 6);
    const Matrix t = oracles::random_matrix(rng, 4, 6);
    const LossOutput out = topkd::kd_kl_loss(s, t, 4.0);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) { return topkd::kd_kl_loss(m, t, 4.0).value; }, s, kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(KdKl, BadTemperatureThrows) {
  const Matrix m(2, 3);
  EXPECT_THROW(topkd::kd_kl_loss(m, m, 0.0), std::invalid_argument);
}

TEST(SupervisedCe, OneClassIsZero) {
  const Matrix logits = Matrix::from_rows({{2.5}, {1.0}});
  const LossOutput out = topkd::supervised_ce_loss(logits, {0, 0});
  EXPECT_DOUBLE_EQ(out.value, 0.0);
}

TEST(SupervisedCe, GradientRowsSumToZero) {
  RandomStream rng(40);
  const Matrix s = oracles::random_matrix(rng, 5, 7);
  IndexVector labels;
  for (std::size_t i = 0; i < 5; ++i) labels.push_back(rng.uniform_index(7));
  const LossOutput out = topkd::supervised_ce_loss(s, labels);
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) sum += out.grad_student(i, j);
    EXPECT_NEAR(sum, 0.0, 1e-15);
  }
}

TEST(SupervisedCe, GradientMatchesFiniteDifferences) {
  RandomStream rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = oracles::random_matrix(rng, 4, 6);
    IndexVector labels;
    for (std::size_t i = 0; i < 4; ++i) labels.push_back(rng.uniform_index(6));
    const LossOutput out = topkd::supervised_ce_loss(s, labels);
    const Matrix fd = topkd::finite_difference_grad(
        [&](const Matrix& m) { return topkd::supervised_ce_loss(m, labels).value; }, s,
        kFdStep);
    EXPECT_LT(oracles::max_rel_error(out.grad_student, fd), kGradTol) << "trial " << trial;
  }
}

TEST(Losses, TeacherPerturbationNeverChangesGradShape) {
  RandomStream rng(42);
  const Matrix s = oracles::random_matrix(rng, 3, 8);
  Matrix t = random_matrix_no_ties(rng, 3, 8);
  const auto base = topkd::tdl_loss(s, t, tdl_spec(2));
  for (double& v : t.data()) v += rng.uniform(-0.5, 0.5);
  const auto bumped = topkd::tdl_loss(s, t, tdl_spec(2));
  EXPECT_EQ(base.grad_student.rows(), bumped.grad_student.rows());
  EXPECT_EQ(base.grad_student.cols(), bumped.grad_student.cols());
  EXPECT_TRUE(bumped.grad_student.all_finite());
}
