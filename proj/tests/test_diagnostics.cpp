#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phl/diagnostics.hpp"

using namespace phl;

namespace {

Tensor gaussian(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

// Independent oracle: Gaussian elimination with partial pivoting and a
// relative pivot threshold, suited to well-conditioned generated matrices.
Index elimination_rank(Tensor a) {
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  Index rank = 0;
  for (Index col = 0; col < a.cols() && rank < a.rows(); ++col) {
    Index pivot = rank;
    for (Index r = rank; r < a.rows(); ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (std::abs(a(pivot, col)) < 1e-9 * scale) continue;
    a.row(rank).swap(a.row(pivot));
    for (Index r = rank + 1; r < a.rows(); ++r) a.row(r) -= a(r, col) / a(rank, col) * a.row(rank);
    ++rank;
  }
  return rank;
}

// Product of Gaussian factors: rank min(r, q, n) with high probability and
// singular values far from the tolerance.
Tensor low_rank(Index n, Index q, Index r, std::mt19937_64& rng) {
  return gaussian(n, r, rng) * gaussian(r, q, rng);
}

}  // namespace

TEST(Rank, HandExamples) {
  Tensor ones = Tensor::Ones(3, 3);
  EXPECT_EQ(numerical_rank(ones), 1);
  EXPECT_EQ(numerical_rank(Tensor::Identity(4, 4)), 4);
  Tensor z = Tensor::Zero(3, 2);
  EXPECT_EQ(numerical_rank(z), 0);
  EXPECT_THROW(numerical_rank(Tensor(0, 3)), ShapeError);
}

TEST(Rank, ExplicitToleranceOverridesDefault) {
  Tensor d = Tensor::Zero(3, 3);
  d.diagonal() << 1.0, 1e-3, 1e-8;
  EXPECT_EQ(numerical_rank(d), 3);
  EXPECT_EQ(numerical_rank(d, 1e-4), 2);
  EXPECT_EQ(numerical_rank(d, 2.0), 0);
}

TEST(Rank, AgreesWithEliminationOracle) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Index> dim(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = dim(rng), q = dim(rng), r = dim(rng);
    const Tensor m = low_rank(n, q, r, rng);
    EXPECT_EQ(numerical_rank(m), elimination_rank(m)) << n << "x" << q << " r" << r;
    EXPECT_EQ(numerical_rank(m), std::min({n, q, r}));
  }
}

TEST(Rank, FloatScalarUsesItsOwnEpsilon) {
  Eigen::MatrixXf d = Eigen::MatrixXf::Zero(3, 3);
  d.diagonal() << 1.0f, 1e-3f, 1e-7f;
  EXPECT_EQ(numerical_rank(d), 2);
  EXPECT_EQ(numerical_rank(d.cast<double>().eval()), 3);
}

TEST(Spectrum, TraceEqualsTotalVariance) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = gaussian(30, 6, rng);
    const SpectrumReport s = covariance_spectrum(f);
    const Tensor centered = f.rowwise() - f.colwise().mean();
    const double total = centered.squaredNorm() / 29.0;
    EXPECT_NEAR(s.eigenvalues.sum(), total, 1e-10 * total);
    for (Index i = 1; i < s.eigenvalues.size(); ++i) {
      EXPECT_GE(s.eigenvalues(i - 1), s.eigenvalues(i));
    }
    EXPECT_GE(s.eigenvalues.minCoeff(), 0.0);
    EXPECT_EQ(s.rank, 6);
  }
}

TEST(Spectrum, CenteringRemovesConstantOffsets) {
  std::mt19937_64 rng(3);
  Tensor f = low_rank(40, 5, 2, rng);
  const SpectrumReport before = covariance_spectrum(f);
  f.rowwise() += RowVector::Constant(5, 7.0);
  const SpectrumReport after = covariance_spectrum(f);
  EXPECT_EQ(before.rank, 2);
  EXPECT_EQ(after.rank, 2);
  EXPECT_LT((before.eigenvalues - after.eigenvalues).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(after.eigenvalues.size(), 5);
}

TEST(Spectrum, MoreColumnsThanRowsPadsWithZeros) {
  std::mt19937_64 rng(4);
  const SpectrumReport s = covariance_spectrum(gaussian(4, 7, rng));
  EXPECT_EQ(s.eigenvalues.size(), 7);
  EXPECT_EQ(s.rank, 3);  // centering removes one degree of freedom
  EXPECT_EQ(s.eigenvalues(6), 0.0);
}

TEST(Spectrum, Errors) {
  EXPECT_THROW(covariance_spectrum(Tensor::Ones(1, 3)), ShapeError);
  Tensor bad = Tensor::Ones(3, 2);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(covariance_spectrum(bad), NumericalError);
}

TEST(RankDeficit, ProjectionLosesRank) {
  std::mt19937_64 rng(5);
  const Tensor h = gaussian(50, 8, rng);
  const Tensor a = gaussian(3, 8, rng);
  EXPECT_EQ(rank_deficit(h, Tensor(h * a.transpose())), 5);
  EXPECT_EQ(rank_deficit(Tensor(h.leftCols(2)), h), -6);
  EXPECT_THROW(rank_deficit(h, Tensor::Ones(49, 3)), ShapeError);
}

TEST(PseudoInverse, HandExamples) {
  Tensor a(1, 2);
  a << 3.0, 4.0;
  const Tensor p = right_pseudo_inverse(a);
  EXPECT_NEAR(p(0, 0), 3.0 / 25.0, 1e-15);
  EXPECT_NEAR(p(1, 0), 4.0 / 25.0, 1e-15);
  const Tensor id = right_pseudo_inverse(Tensor::Identity(3, 3));
  EXPECT_LT((id - Tensor::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PseudoInverse, RightInverseProperty) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = gaussian(3, 7, rng);
    const Tensor p = right_pseudo_inverse(a);
    EXPECT_LT((a * p - Tensor::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
    // Agrees with the normal-equation formula on well-conditioned A.
    const Tensor normal = a.transpose() * (a * a.transpose()).inverse();
    EXPECT_LT((p - normal).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(PseudoInverse, RejectsRankDeficientAndTallMatrices) {
  Tensor a(2, 3);
  a << 1, 2, 3, 2, 4, 6;
  EXPECT_THROW(right_pseudo_inverse(a), NumericalError);
  EXPECT_THROW(right_pseudo_inverse(Tensor::Ones(4, 2)), NumericalError);
  EXPECT_THROW(right_pseudo_inverse(Tensor(0, 2)), ShapeError);
}

TEST(NullSpace, HandExample) {
  Tensor a(1, 2);
  a << 1.0, 0.0;
  Tensor h(1, 2);
  h << 2.0, 5.0;
  const auto split = null_space_decompose(a, h);
  EXPECT_NEAR(split.range(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(split.range(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(split.null(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(split.null(0, 1), 5.0, 1e-15);
}

TEST(NullSpace, DecompositionProperties) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = gaussian(3, 8, rng);
    const Tensor h = gaussian(20, 8, rng);
    const auto split = null_space_decompose(a, h);
    // Reconstruction, annihilation, orthogonality, image preservation.
    EXPECT_LT((split.range + split.null - h).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((split.null * a.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((split.range.array() * split.null.array()).rowwise().sum().abs().maxCoeff(), 1e-10);
    EXPECT_LT((split.range * a.transpose() - h * a.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    // The split is idempotent.
    const auto again = null_space_decompose(a, split.range);
    EXPECT_LT(again.null.cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(NullSpace, ShapeMismatch) {
  EXPECT_THROW(null_space_decompose(Tensor::Identity(2, 3), Tensor::Ones(4, 2)), ShapeError);
}
