#pragma once

// Inner-product geometry induced by the inverse uncentered covariance C^-1 of
// text encodings. Similarities, energies and orthogonal projections used by
// the rank-1 edits all live here.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>

#include "klr/error.hpp"

namespace klr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

namespace detail {

template <typename Scalar>
double smallest_pivot(const MatrixX<Scalar>& a) {
  Eigen::LDLT<MatrixX<Scalar>> ldlt(a);
  return static_cast<double>(ldlt.vectorD().minCoeff());
}

template <typename Scalar>
Eigen::LLT<MatrixX<Scalar>> checked_cholesky(const MatrixX<Scalar>& a, const char* what) {
  Eigen::LLT<MatrixX<Scalar>> llt(a);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError(std::string(what) + " is not positive definite", smallest_pivot(a));
  }
  // Eigen's LLT accepts some numerically singular matrices; reject zero pivots too.
  const auto diag = llt.matrixL().toDenseMatrix().diagonal();
  if (!(diag.minCoeff() > Scalar(0)) || !diag.allFinite()) {
    throw FactorizationError(std::string(what) + " is not positive definite", smallest_pivot(a));
  }
  return llt;
}

template <typename Derived>
void require_dim(const Eigen::MatrixBase<Derived>& v, Eigen::Index dim, const char* name) {
  if (v.size() != dim) {
    throw ContractError(std::string(name) + " has dimension " + std::to_string(v.size()) +
                        ", metric dimension is " + std::to_string(dim));
  }
}

}  // namespace detail

/// C^-1 together with its lower Cholesky factor L (C^-1 = L L^T). Immutable.
template <typename Scalar>
class MetricSpace {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  /// Builds the metric around a given C^-1; factorizes it.
  static MetricSpace from_inverse_covariance(Matrix c_inv) {
    if (c_inv.rows() == 0 || c_inv.rows() != c_inv.cols()) {
      throw ContractError("C^-1 must be square and nonempty");
    }
    const Scalar asym = (c_inv - c_inv.transpose()).norm();
    if (asym > Scalar(1e-12) * c_inv.norm()) {
      throw ContractError("C^-1 is not symmetric");
    }
    auto llt = detail::checked_cholesky<Scalar>(c_inv, "C^-1");
    Matrix chol = llt.matrixL();
    return MetricSpace(std::move(c_inv), std::move(chol));
  }

  /// Rebuilds a metric from a cached (C^-1, L) pair, checking L L^T = C^-1.
  static MetricSpace from_factors(Matrix c_inv, Matrix chol) {
    if (c_inv.rows() == 0 || c_inv.rows() != c_inv.cols() || chol.rows() != c_inv.rows() ||
        chol.cols() != c_inv.cols()) {
      throw ContractError("C^-1 and its Cholesky factor must be square with equal size");
    }
    if (!chol.template triangularView<Eigen::StrictlyUpper>().toDenseMatrix().isZero(0)) {
      throw ContractError("Cholesky factor is not lower triangular");
    }
    const Scalar err = (chol * chol.transpose() - c_inv).norm();
    if (err > Scalar(1e-10) * c_inv.norm()) {
      throw ContractError("Cholesky factor does not reconstruct C^-1");
    }
    return MetricSpace(std::move(c_inv), std::move(chol));
  }

  Eigen::Index dim() const noexcept { return c_inv_.rows(); }
  const Matrix& c_inv() const noexcept { return c_inv_; }
  /// Lower triangular L with C^-1 = L L^T.
  const Matrix& chol() const noexcept { return chol_; }

  /// Maps encoder-space vectors (columns) into the whitened metric space: L^T x.
  template <typename Derived>
  Matrix to_metric_space(const Eigen::MatrixBase<Derived>& x) const {
    return chol_.transpose() * x;
  }

  /// Inverse of to_metric_space: (L^T)^-1 y, by triangular solve.
  template <typename Derived>
  Matrix from_metric_space(const Eigen::MatrixBase<Derived>& y) const {
    return chol_.transpose().template triangularView<Eigen::Upper>().solve(y);
  }

  bool operator==(const MetricSpace& other) const {
    return c_inv_.rows() == other.c_inv_.rows() && c_inv_ == other.c_inv_;
  }

 private:
  MetricSpace(Matrix c_inv, Matrix chol) : c_inv_(std::move(c_inv)), chol_(std::move(chol)) {}

  Matrix c_inv_;
  Matrix chol_;
};

/// ridge = 1e-6 * trace(C) / d for the unregularized uncentered covariance of `samples`.
template <typename Scalar>
Scalar default_ridge(std::span<const VectorX<Scalar>> samples) {
  if (samples.empty()) throw ContractError("default_ridge needs at least one sample");
  Scalar trace = 0;
  for (const auto& s : samples) trace += s.squaredNorm();
  trace /= static_cast<Scalar>(samples.size());
  return Scalar(1e-6) * trace / static_cast<Scalar>(samples.front().size());
}

/// Uncentered covariance C = (1/N) sum e e^T + ridge * I.
///
/// Samples are accumulated in lexicographic order of their coordinates, so the
/// result is bitwise independent of the order in which they are passed.
template <typename Scalar>
MatrixX<Scalar> uncentered_covariance(std::span<const VectorX<Scalar>> samples, Scalar ridge) {
  if (samples.empty() && !(ridge > 0)) {
    throw ContractError("covariance needs samples or a positive ridge");
  }
  if (ridge < 0) throw ContractError("ridge must be nonnegative");
  if (samples.empty()) throw ContractError("covariance needs at least one sample to fix the dimension");
  const Eigen::Index dim = samples.front().size();
  if (dim == 0) throw ContractError("samples must be nonempty vectors");
  if (static_cast<Eigen::Index>(samples.size()) < dim && !(ridge > 0)) {
    throw ContractError("fewer samples (" + std::to_string(samples.size()) + ") than dimension (" +
                        std::to_string(dim) + ") requires a positive ridge");
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const auto& s : samples) detail::require_dim(s, dim, "sample");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = samples[a];
    const auto& y = samples[b];
    return std::lexicographical_compare(x.data(), x.data() + x.size(), y.data(), y.data() + y.size());
  });

  MatrixX<Scalar> c = MatrixX<Scalar>::Zero(dim, dim);
  for (std::size_t idx : order) {
    const auto& s = samples[idx];
    c.noalias() += s * s.transpose();
  }
  c /= static_cast<Scalar>(samples.size());
  c.diagonal().array() += ridge;
  return c;
}

/// Estimates C from samples and returns the metric around C^-1. C^-1 comes from
/// a Cholesky solve of C, never an explicit inverse.
template <typename Scalar>
MetricSpace<Scalar> estimate_covariance(std::span<const VectorX<Scalar>> samples, Scalar ridge) {
  MatrixX<Scalar> c = uncentered_covariance(samples, ridge);
  auto llt = detail::checked_cholesky<Scalar>(c, "covariance C");
  MatrixX<Scalar> c_inv = llt.solve(MatrixX<Scalar>::Identity(c.rows(), c.cols()));
  c_inv = Scalar(0.5) * (c_inv + c_inv.transpose()).eval();
  return MetricSpace<Scalar>::from_inverse_covariance(std::move(c_inv));
}

/// sim(i, e) = i^T (C^-1)^T e.
template <typename Scalar, typename DerivedI, typename DerivedE>
Scalar sim(const Eigen::MatrixBase<DerivedI>& i, const Eigen::MatrixBase<DerivedE>& e,
           const MetricSpace<Scalar>& m) {
  detail::require_dim(i, m.dim(), "i");
  detail::require_dim(e, m.dim(), "e");
  return (m.c_inv() * i).dot(e);
}

/// ||i||^2 in the C^-1 metric.
template <typename Scalar, typename Derived>
Scalar energy(const Eigen::MatrixBase<Derived>& i, const MetricSpace<Scalar>& m) {
  detail::require_dim(i, m.dim(), "i");
  if (i.isZero(0)) throw DegenerateInputError("zero vector has no metric energy");
  const Scalar en = sim(i, i, m);
  if (!(en > 0)) throw DegenerateInputError("non-positive metric energy");
  return en;
}

/// Component of e orthogonal to i_star in the C^-1 metric.
template <typename Scalar, typename DerivedE, typename DerivedI>
VectorX<Scalar> project_orthogonal(const Eigen::MatrixBase<DerivedE>& e,
                                   const Eigen::MatrixBase<DerivedI>& i_star,
                                   const MetricSpace<Scalar>& m) {
  const Scalar en = energy(i_star, m);
  return e - i_star * (sim(i_star, e, m) / en);
}

/// Metric-orthonormal basis spanning a set of target-inputs.
///
/// u_tilde columns are orthonormal in the whitened space (L^T x); u columns are
/// the same directions mapped back, u = (L^T)^-1 u_tilde, so that
/// sim(u_j, e) = u_tilde_j . (L^T e).
template <typename Scalar>
class ConceptBasis {
 public:
  using Matrix = MatrixX<Scalar>;

  ConceptBasis(Matrix u_tilde, Matrix u, Matrix targets, Matrix c_inv, std::vector<int> kept,
               std::vector<int> dropped)
      : u_tilde_(std::move(u_tilde)),
        u_(std::move(u)),
        targets_(std::move(targets)),
        c_inv_(std::move(c_inv)),
        kept_(std::move(kept)),
        dropped_(std::move(dropped)) {}

  Eigen::Index count() const noexcept { return u_.cols(); }
  const Matrix& u_tilde() const noexcept { return u_tilde_; }
  const Matrix& u() const noexcept { return u_; }
  /// The target-inputs the basis was built from, one per column, in input order.
  const Matrix& targets() const noexcept { return targets_; }
  /// Input indices whose direction survived, in basis order.
  const std::vector<int>& kept() const noexcept { return kept_; }
  /// Input indices dropped as linearly dependent on the others.
  const std::vector<int>& dropped() const noexcept { return dropped_; }

  bool built_over(const MetricSpace<Scalar>& m) const {
    return c_inv_.rows() == m.dim() && c_inv_ == m.c_inv();
  }

 private:
  Matrix u_tilde_;
  Matrix u_;
  Matrix targets_;
  Matrix c_inv_;
  std::vector<int> kept_;
  std::vector<int> dropped_;
};

/// Column-pivoted QR of L^T [i*_1 ... i*_J]. Directions whose pivot falls below
/// drop_tolerance * (largest column norm) are dropped and reported.
template <typename Scalar>
ConceptBasis<Scalar> orthonormal_basis(const MatrixX<Scalar>& targets, const MetricSpace<Scalar>& m,
                                       Scalar drop_tolerance = Scalar(1e-8)) {
  const Eigen::Index d = m.dim();
  const Eigen::Index count = targets.cols();
  if (count == 0) throw ContractError("orthonormal_basis needs at least one target");
  if (targets.rows() != d) {
    throw ContractError("targets have dimension " + std::to_string(targets.rows()) + ", metric dimension is " +
                        std::to_string(d));
  }
  if (count > d) {
    throw ContractError("more targets (" + std::to_string(count) + ") than dimensions (" + std::to_string(d) + ")");
  }
  for (Eigen::Index j = 0; j < count; ++j) {
    if (targets.col(j).isZero(0)) throw DegenerateInputError("target " + std::to_string(j) + " is zero");
  }

  const MatrixX<Scalar> whitened = m.to_metric_space(targets);
  Eigen::ColPivHouseholderQR<MatrixX<Scalar>> qr(whitened);
  qr.setThreshold(drop_tolerance);
  const Eigen::Index rank = qr.rank();

  const MatrixX<Scalar> r = qr.matrixR().template triangularView<Eigen::Upper>();
  MatrixX<Scalar> q = qr.householderQ() * MatrixX<Scalar>::Identity(d, rank);
  // Fix the Householder sign ambiguity: each basis vector points along its target.
  for (Eigen::Index j = 0; j < rank; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }

  std::vector<int> kept;
  std::vector<int> dropped;
  const auto& perm = qr.colsPermutation().indices();
  for (Eigen::Index j = 0; j < count; ++j) {
    (j < rank ? kept : dropped).push_back(perm(j));
  }

  MatrixX<Scalar> u = m.from_metric_space(q);
  return ConceptBasis<Scalar>(std::move(q), std::move(u), targets, m.c_inv(), std::move(kept), std::move(dropped));
}

/// e minus its projection onto span{i*_j}: e - sum_j u_j sim(u_j, e).
template <typename Scalar, typename Derived>
VectorX<Scalar> project_orthogonal(const Eigen::MatrixBase<Derived>& e, const ConceptBasis<Scalar>& basis,
                                   const MetricSpace<Scalar>& m) {
  if (!basis.built_over(m)) throw ContractError("concept basis was built over a different metric");
  detail::require_dim(e, m.dim(), "e");
  const VectorX<Scalar> coeffs = (m.c_inv() * basis.u()).transpose() * e;
  return e - basis.u() * coeffs;
}

}  // namespace klr
