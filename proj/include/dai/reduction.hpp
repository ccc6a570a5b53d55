#pragma once

#include <stdexcept>
#include <vector>

#include "dai/graph.hpp"
#include "dai/linalg.hpp"
#include "dai/netmodel.hpp"

namespace dai {

/// Everything the LMI certificate and the reduced error dynamics consume:
/// the orthonormal complement W of K^{-1/2} A^{-1} 1, the scalar
/// mu = ||K^{-1/2} A^{-1} 1||^2, the reduced Laplacians Lbar[l] and the
/// reduced channel matrices Tbar[l][m].
struct ReducedSystem {
  MatrixXd W;      // n x (n-1), orthonormal columns, W^T K^{-1/2} A^{-1} 1 = 0
  double mu = 0.0;
  VectorXd khalf;  // diag of K^{1/2}, cached
  std::vector<MatrixXd> Lbar;               // per topology, (n-1) x (n-1), PD
  std::vector<std::vector<MatrixXd>> Tbar;  // per topology and channel
  TopologySet topo;

  int n() const { return static_cast<int>(W.rows()); }
  int reduced_dim() const { return static_cast<int>(W.cols()); }
  int num_channels() const { return topo.num_channels(); }

  /// K^{1/2} W, the n x (n-1) factor appearing throughout the LMI blocks.
  MatrixXd khalf_w() const { return khalf.asDiagonal() * W; }
};

namespace detail {

/// Orthonormal basis of the complement of v via the Householder reflector
/// mapping v/||v|| to -e1 (built with w = u + e1, which never cancels since
/// v has positive entries). Columns 1..n-1 of the reflector are the basis.
/// Deterministic and sign-fixed.
inline MatrixXd householder_complement(const VectorXd& v) {
  const int n = static_cast<int>(v.size());
  VectorXd u = v / v.norm();
  VectorXd w = u;
  w(0) += 1.0;
  MatrixXd h = MatrixXd::Identity(n, n) - (2.0 / w.squaredNorm()) * (w * w.transpose());
  return h.rightCols(n - 1);
}

}  // namespace detail

/// Builds the reduction for fixed gains. Rejects kappa = 0 (K singular) and
/// disconnected topologies (Lbar would be singular).
inline ReducedSystem build_reduction(const DaiParams& dai, const TopologySet& ts) {
  dai.validate();
  if (dai.kappa <= 0.0) throw std::invalid_argument("build_reduction: kappa must be > 0");
  const int n = ts.n();
  if (dai.A.size() != n) throw std::invalid_argument("build_reduction: dimension mismatch");
  auto diag = validate_topology_set(ts);
  if (!diag.pass)
    throw std::invalid_argument("build_reduction: disconnected topology at index " +
                                std::to_string(diag.first_disconnected));

  ReducedSystem rs;
  rs.topo = ts;
  const VectorXd k = dai.K();
  rs.khalf = k.cwiseSqrt();
  const VectorXd v = rs.khalf.cwiseInverse().cwiseProduct(dai.A.cwiseInverse());  // K^{-1/2} A^{-1} 1
  rs.mu = v.squaredNorm();
  rs.W = n > 1 ? detail::householder_complement(v) : MatrixXd(1, 0);

  const MatrixXd g = (dai.A.cwiseProduct(rs.khalf)).asDiagonal() * rs.W;  // A K^{1/2} W
  auto tmats = channel_matrices(ts);
  rs.Lbar.reserve(ts.num_topologies());
  rs.Tbar.resize(ts.num_topologies());
  for (int l = 0; l < ts.num_topologies(); ++l) {
    rs.Lbar.push_back(symmetrized(g.transpose() * laplacian(ts.graphs[l]) * g));
    rs.Tbar[l].reserve(ts.num_channels());
    for (int m = 0; m < ts.num_channels(); ++m) rs.Tbar[l].push_back(g.transpose() * tmats[l][m] * g);
  }
  return rs;
}

/// (pbar; zeta) = curly-W^T K^{-1/2} p.
inline std::pair<VectorXd, double> to_reduced_p(const ReducedSystem& rs, const DaiParams& dai,
                                                const VectorXd& p) {
  if (p.size() != rs.n()) throw std::invalid_argument("to_reduced_p: dimension mismatch");
  const VectorXd scaled = rs.khalf.cwiseInverse().cwiseProduct(p);  // K^{-1/2} p
  VectorXd pbar = rs.W.transpose() * scaled;
  const VectorXd kinv_ainv = dai.K().cwiseInverse().cwiseProduct(dai.A.cwiseInverse());
  double zeta = kinv_ainv.dot(p) / std::sqrt(rs.mu);
  return {pbar, zeta};
}

/// p = K^{1/2} (W pbar + mu^{-1/2} K^{-1/2} A^{-1} 1 zeta); inverse of to_reduced_p.
inline VectorXd from_reduced_p(const ReducedSystem& rs, const DaiParams& dai, const VectorXd& pbar,
                               double zeta) {
  if (pbar.size() != rs.reduced_dim()) throw std::invalid_argument("from_reduced_p: dimension mismatch");
  const VectorXd khalf_inv_ainv = rs.khalf.cwiseInverse().cwiseProduct(dai.A.cwiseInverse());
  VectorXd inner = rs.W * pbar + khalf_inv_ainv * (zeta / std::sqrt(rs.mu));
  return rs.khalf.cwiseProduct(inner);
}

/// zeta-bar-0 from initial data: mu^{-1/2} 1^T A^{-1} (K^{-1} p0 - theta0).
/// Never enters the reduced dynamics; used only for reconstruction.
inline double compute_zeta0(const ReducedSystem& rs, const DaiParams& dai, const VectorXd& p0,
                            const VectorXd& theta0) {
  const VectorXd ainv = dai.A.cwiseInverse();
  return ainv.dot(dai.K().cwiseInverse().cwiseProduct(p0) - theta0) / std::sqrt(rs.mu);
}

/// zeta(t) recovered from angles: mu^{-1/2} 1^T A^{-1} (theta - 1 wd t) + zeta0.
inline double zeta_from_theta(const ReducedSystem& rs, const DaiParams& dai, const VectorXd& theta,
                              double wd_times_t, double zeta0) {
  const VectorXd ainv = dai.A.cwiseInverse();
  return (ainv.dot(theta) - ainv.sum() * wd_times_t) / std::sqrt(rs.mu) + zeta0;
}

/// Shifts an equilibrium along span(1) so the synchronized motion it
/// defines shares the trajectory's zeta0, i.e.
/// 1^T A^{-1}(K^{-1} p* - theta*) = 1^T A^{-1}(K^{-1} p0 - theta0).
/// Error coordinates built against the aligned theta* make z* = 0 the
/// target of exactly the solution launched from (theta0, p0).
inline VectorXd align_theta_star(const DaiParams& dai, const VectorXd& theta_star,
                                 const VectorXd& p_star_vec, const VectorXd& theta0,
                                 const VectorXd& p0) {
  const VectorXd ainv = dai.A.cwiseInverse();
  const VectorXd kinv = dai.K().cwiseInverse();
  const double c = (ainv.dot(kinv.cwiseProduct(p_star_vec) - theta_star) -
                    ainv.dot(kinv.cwiseProduct(p0) - theta0)) /
                   ainv.sum();
  return theta_star.array() + c;
}

/// Error state in reduced coordinates: x = col(theta-tilde, omega-tilde, p-tilde).
struct ErrorState {
  VectorXd theta_t;  // n
  VectorXd omega_t;  // n
  VectorXd p_t;      // n-1
};

/// Right-hand side of the switched delayed closed loop in reduced error
/// coordinates. delayed_pt[m] supplies p-tilde at t - tau_m for channel m.
inline ErrorState error_rhs(const PowerNetwork& net, const DaiParams& dai, const ReducedSystem& rs,
                            const ErrorState& x, const std::vector<VectorXd>& delayed_pt, int ell,
                            const VectorXd& theta_star) {
  const int n = net.n;
  const int d = rs.reduced_dim();
  if (x.theta_t.size() != n || x.omega_t.size() != n || x.p_t.size() != d)
    throw std::invalid_argument("error_rhs: state dimension mismatch");
  if (static_cast<int>(delayed_pt.size()) != rs.num_channels())
    throw std::invalid_argument("error_rhs: delayed_pt channel count mismatch");
  if (ell < 0 || ell >= rs.topo.num_topologies())
    throw std::invalid_argument("error_rhs: invalid topology index");

  const VectorXd ainv = dai.A.cwiseInverse();
  ErrorState d_dt;
  d_dt.theta_t = x.omega_t;
  VectorXd force = -net.D.cwiseProduct(x.omega_t);
  force -= grad_potential(net, x.theta_t + theta_star) - grad_potential(net, theta_star);
  force -= rs.khalf.cwiseProduct(rs.W * x.p_t);
  force -= ainv * (ainv.dot(x.theta_t) / rs.mu);
  d_dt.omega_t = force.cwiseQuotient(net.M);

  VectorXd pdot = rs.W.transpose() * rs.khalf.cwiseProduct(x.omega_t);
  for (int m = 0; m < rs.num_channels(); ++m) {
    if (!rs.topo.membership[ell][m]) continue;
    if (delayed_pt[m].size() != d) throw std::invalid_argument("error_rhs: delayed_pt size mismatch");
    pdot -= rs.Tbar[ell][m] * delayed_pt[m];
  }
  d_dt.p_t = pdot;
  return d_dt;
}

}  // namespace dai
