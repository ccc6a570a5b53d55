#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace dai {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline MatrixXd symmetrized(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Smallest eigenvalue of a symmetric matrix. Empty matrices count as
/// unconstrained, i.e. +inf.
inline double min_eigenvalue(const MatrixXd& sym) {
  if (sym.rows() == 0) return std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  return es.eigenvalues().minCoeff();
}

inline double max_eigenvalue(const MatrixXd& sym) {
  if (sym.rows() == 0) return -std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  return es.eigenvalues().maxCoeff();
}

inline VectorXd eigenvalues_sorted(const MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues();  // ascending
}

inline bool is_positive_definite(const MatrixXd& sym, double margin = 0.0) {
  if (sym.rows() == 0) return true;
  Eigen::LLT<MatrixXd> llt(sym - margin * MatrixXd::Identity(sym.rows(), sym.cols()));
  return llt.info() == Eigen::Success;
}

inline bool all_finite(const MatrixXd& m) { return m.allFinite(); }

}  // namespace dai
