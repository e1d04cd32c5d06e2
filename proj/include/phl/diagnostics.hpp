#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include <Eigen/SVD>

#include "phl/tensor.hpp"

namespace phl {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct SpectrumReport {
  Vector eigenvalues;  // descending, length q
  Index rank = 0;      // numerical rank of the centered feature matrix
  double tolerance = 0.0;
};

template <typename Derived>
DenseVector<typename Derived::Scalar> singular_values(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Eigen::BDCSVD<DenseMatrix<Scalar>> svd(m.eval());
  return svd.singularValues();
}

/// sigma_max * max(rows, cols) * machine epsilon.
template <typename Scalar>
Scalar rank_tolerance(const DenseVector<Scalar>& sv, Index rows, Index cols) {
  if (sv.size() == 0) return Scalar(0);
  return sv.maxCoeff() * static_cast<Scalar>(std::max(rows, cols)) *
         std::numeric_limits<Scalar>::epsilon();
}

/// Count of singular values above `tol` (matrix_rank convention when unset).
template <typename Derived>
Index numerical_rank(const Eigen::MatrixBase<Derived>& m,
                     std::optional<typename Derived::Scalar> tol = std::nullopt) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("numerical_rank: empty matrix");
  const auto sv = singular_values(m);
  const auto threshold = tol ? *tol : rank_tolerance(sv, m.rows(), m.cols());
  return static_cast<Index>((sv.array() > threshold).count());
}

/// Eigenvalues of the sample covariance of the rows, via the singular values
/// of the mean-centered matrix: lambda_i = sigma_i^2 / (N - 1).
template <typename Derived>
SpectrumReport covariance_spectrum(const Eigen::MatrixBase<Derived>& features) {
  const Index n = features.rows(), q = features.cols();
  if (n < 2) throw ShapeError("covariance_spectrum: need at least two rows");
  if (!features.allFinite()) throw NumericalError("covariance_spectrum: non-finite features");
  const Tensor f = features.template cast<double>();
  const Tensor centered = f.rowwise() - f.colwise().mean();
  const Vector sv = singular_values(centered);

  SpectrumReport report;
  report.eigenvalues = Vector::Zero(q);
  const Index k = std::min<Index>(sv.size(), q);
  for (Index i = 0; i < k; ++i) {
    report.eigenvalues(i) = sv(i) * sv(i) / static_cast<double>(n - 1);
  }
  std::sort(report.eigenvalues.data(), report.eigenvalues.data() + q, std::greater<>());
  report.tolerance = rank_tolerance(sv, n, q);
  report.rank = static_cast<Index>((sv.array() > report.tolerance).count());
  return report;
}

/// rank(H) - rank(Z) on the raw feature matrices; may be negative.
template <typename DerivedH, typename DerivedZ>
Index rank_deficit(const Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedZ>& z) {
  if (h.rows() != z.rows()) {
    throw ShapeError("rank_deficit: H has " + std::to_string(h.rows()) + " rows, Z has " +
                     std::to_string(z.rows()));
  }
  return numerical_rank(h) - numerical_rank(z);
}

/// A^+ = A^T (A A^T)^{-1} for full-row-rank A (d x m), computed from the SVD.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> right_pseudo_inverse(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() == 0 || a.cols() == 0) throw ShapeError("right_pseudo_inverse: empty matrix");
  if (a.rows() > a.cols()) {
    throw NumericalError("right_pseudo_inverse: " + std::to_string(a.rows()) + " x " +
                         std::to_string(a.cols()) + " matrix cannot have full row rank");
  }
  Eigen::JacobiSVD<DenseMatrix<Scalar>> svd(a.eval(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const DenseVector<Scalar> sv = svd.singularValues();
  const Scalar tol = rank_tolerance(sv, a.rows(), a.cols());
  const Scalar smallest = sv(sv.size() - 1);
  if (!(smallest > tol)) {
    throw NumericalError("right_pseudo_inverse: row-rank deficient, sigma_min = " +
                         std::to_string(static_cast<double>(smallest)) + " <= tolerance " +
                         std::to_string(static_cast<double>(tol)));
  }
  return svd.matrixV() * sv.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
}

template <typename Scalar>
struct NullSpaceSplit {
  DenseMatrix<Scalar> range;  // h_r = A^+ A h, row per example
  DenseMatrix<Scalar> null;   // h_n = h - h_r
};

/// Splits each row h of `features` into its component in the row space of A
/// and the remainder in the null space of A.
template <typename DerivedA, typename DerivedH>
NullSpaceSplit<typename DerivedA::Scalar> null_space_decompose(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedH>& features) {
  using Scalar = typename DerivedA::Scalar;
  if (features.cols() != a.cols()) {
    throw ShapeError("null_space_decompose: features have " + std::to_string(features.cols()) +
                     " columns, A has " + std::to_string(a.cols()));
  }
  const DenseMatrix<Scalar> projector = right_pseudo_inverse(a) * a;
  NullSpaceSplit<Scalar> split;
  // Rows: h_r^T = h^T (A^+ A)^T
  split.range = features * projector.transpose();
  split.null = features - split.range;
  return split;
}

}  // namespace phl
