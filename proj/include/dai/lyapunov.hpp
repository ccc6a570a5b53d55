#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dai/linalg.hpp"
#include "dai/netmodel.hpp"
#include "dai/reduction.hpp"
#include "dai/rng.hpp"

namespace dai {

struct LyapunovConfig {
  double epsilon = 0.0;  // cross-term weight, >= 0
  double gamma = 0.0;    // bound with E22 <= gamma I
};

/// Evaluates the strict Lyapunov function: Bregman-centered potential,
/// kinetic and secondary-control energy, the zeta coupling term and the
/// Chetaev cross term. Shifted so the value at zero error is exactly 0.
inline double eval_V(const PowerNetwork& net, const DaiParams& dai, const ReducedSystem& rs,
                     const LyapunovConfig& cfg, const ErrorState& x, const VectorXd& theta_star) {
  const VectorXd grad_star = grad_potential(net, theta_star);
  const VectorXd theta_abs = x.theta_t + theta_star;
  double v = potential(net, theta_abs) - x.theta_t.dot(grad_star) - potential(net, theta_star);
  v += 0.5 * x.omega_t.dot(net.M.cwiseProduct(x.omega_t));
  const double zeta_dir = dai.A.cwiseInverse().dot(x.theta_t);
  v += 0.5 * zeta_dir * zeta_dir / rs.mu;
  v += 0.5 * x.p_t.squaredNorm();
  if (cfg.epsilon != 0.0) {
    const VectorXd flow_err = grad_potential(net, theta_abs) - grad_star;
    v += cfg.epsilon * x.omega_t.dot(dai.A.cwiseProduct(net.M.cwiseProduct(flow_err)));
  }
  return v;
}

/// Hessian of V at the equilibrium, in block form over (theta~, omega~, p~):
/// diagonal blocks Hess U|* + mu^{-1} A^{-1}11^T A^{-1}, M, I. The cross
/// block of the mixed partials is eps Hess U|* AM (its symmetric average is
/// the (eps/2)(AM Hess U|* + Hess U|* MA) form quoted in stability proofs;
/// the diagonal blocks and the small-eps conclusion are identical, but only
/// the exact block matches finite differences of eval_V).
inline MatrixXd hessian_at_eq(const PowerNetwork& net, const DaiParams& dai, const ReducedSystem& rs,
                              const LyapunovConfig& cfg, const VectorXd& theta_star) {
  const int n = net.n;
  const int dim = 3 * n - 1;
  const MatrixXd hess_u = hessian_potential(net, theta_star);
  const VectorXd ainv = dai.A.cwiseInverse();
  const VectorXd am = dai.A.cwiseProduct(net.M);

  MatrixXd h = MatrixXd::Zero(dim, dim);
  h.block(0, 0, n, n) = hess_u + (ainv * ainv.transpose()) / rs.mu;
  h.block(0, n, n, n) = cfg.epsilon * hess_u * am.asDiagonal();
  h.block(n, 0, n, n) = h.block(0, n, n, n).transpose();
  h.block(n, n, n, n) = MatrixXd(net.M.asDiagonal());
  h.block(2 * n, 2 * n, n - 1, n - 1) = MatrixXd::Identity(n - 1, n - 1);
  return h;
}

/// E22(theta) = AM Hess U(theta) + Hess U(theta) MA.
inline MatrixXd e22_matrix(const PowerNetwork& net, const DaiParams& dai, const VectorXd& theta) {
  const MatrixXd hess_u = hessian_potential(net, theta);
  const VectorXd am = dai.A.cwiseProduct(net.M);
  return am.asDiagonal() * hess_u + hess_u * am.asDiagonal();
}

/// The quadratic form of the nominal Lyapunov derivative: Vdot = -xi^T Q xi
/// with xi = col(grad U(theta) - grad U(theta*), omega~, p~) and theta the
/// absolute angle at which E22 is evaluated. Pass a matrix in place of E22
/// to substitute its worst-case bound.
inline MatrixXd vdot_matrix_with_e22(const PowerNetwork& net, const DaiParams& dai,
                                     const ReducedSystem& rs, const LyapunovConfig& cfg,
                                     const MatrixXd& e22, int ell = 0) {
  const int n = net.n;
  const int dim = 2 * n + (n - 1);
  const double eps = cfg.epsilon;
  MatrixXd q = MatrixXd::Zero(dim, dim);
  q.block(0, 0, n, n) = eps * MatrixXd(dai.A.asDiagonal());
  q.block(0, n, n, n) = 0.5 * eps * MatrixXd(dai.A.cwiseProduct(net.D).asDiagonal());
  q.block(n, 0, n, n) = q.block(0, n, n, n).transpose();
  q.block(0, 2 * n, n, n - 1) = 0.5 * eps * dai.A.asDiagonal() * rs.khalf_w();
  q.block(2 * n, 0, n - 1, n) = q.block(0, 2 * n, n, n - 1).transpose();
  q.block(n, n, n, n) = MatrixXd(net.D.asDiagonal()) - 0.5 * eps * e22;
  q.block(2 * n, 2 * n, n - 1, n - 1) = rs.Lbar.at(ell);
  return q;
}

inline MatrixXd vdot_matrix_nominal(const PowerNetwork& net, const DaiParams& dai,
                                    const ReducedSystem& rs, const LyapunovConfig& cfg,
                                    const VectorXd& theta, int ell = 0) {
  return vdot_matrix_with_e22(net, dai, rs, cfg, e22_matrix(net, dai, theta), ell);
}

/// Worst-case bound gamma with E22(theta) <= gamma I for all theta:
/// 2 max_i(A_ii M_i) times the Gershgorin bound 2 max_i sum_k |B_ik| V_i V_k
/// on the potential Hessian (cosines at their worst case 1).
inline double gamma_bound(const PowerNetwork& net, const DaiParams& dai) {
  double row_max = 0.0;
  for (int i = 0; i < net.n; ++i) {
    double row = 0.0;
    for (int k = 0; k < net.n; ++k)
      if (k != i) row += std::abs(net.B(i, k)) * net.V(i) * net.V(k);
    row_max = std::max(row_max, row);
  }
  const double am_max = dai.A.cwiseProduct(net.M).maxCoeff();
  return 2.0 * am_max * 2.0 * row_max;
}

struct EpsilonSearch {
  double epsilon = 0.0;
  bool ok = false;
  int halvings = 0;
  double hessian_min_eig = 0.0;
  double vdot_min_eig = 0.0;  // with the gamma substitution, over all topologies
  std::string message;
};

/// Bisects the cross-term weight from 1 downward until both the Hessian at
/// the equilibrium and the derivative form (with E22 replaced by its gamma
/// bound, checked for every topology) are positive definite. A handful of
/// sampled angles near theta* guard the substitution.
inline EpsilonSearch find_epsilon(const PowerNetwork& net, const DaiParams& dai,
                                  const ReducedSystem& rs, const VectorXd& theta_star,
                                  int max_halvings = 60) {
  EpsilonSearch out;
  const int n = net.n;
  const double gamma = gamma_bound(net, dai);
  const MatrixXd gamma_sub = gamma * MatrixXd::Identity(n, n);
  SplitMix64 rng(0x0DA1);

  double eps = 1.0;
  for (int h = 0; h <= max_halvings; ++h, eps *= 0.5) {
    LyapunovConfig cfg{eps, gamma};
    double hess_min = min_eigenvalue(hessian_at_eq(net, dai, rs, cfg, theta_star));
    if (hess_min <= 0.0) continue;
    double vdot_min = std::numeric_limits<double>::infinity();
    for (int l = 0; l < rs.topo.num_topologies(); ++l)
      vdot_min = std::min(vdot_min, min_eigenvalue(vdot_matrix_with_e22(net, dai, rs, cfg, gamma_sub, l)));
    if (vdot_min <= 0.0) continue;

    bool sampled_ok = true;
    for (int s = 0; s < 32 && sampled_ok; ++s) {
      VectorXd theta = theta_star + VectorXd::NullaryExpr(n, [&](int) { return rng.next_in(-2.0, 2.0); });
      sampled_ok = min_eigenvalue(vdot_matrix_nominal(net, dai, rs, cfg, theta, 0)) > 0.0;
    }
    if (!sampled_ok) continue;

    out.epsilon = eps;
    out.ok = true;
    out.halvings = h;
    out.hessian_min_eig = hess_min;
    out.vdot_min_eig = vdot_min;
    return out;
  }
  out.message = "no epsilon found; equilibrium is on or beyond the security boundary";
  return out;
}

/// Uniform-grid history of error states, most recent sample last.
struct ErrorHistory {
  double dt = 0.0;
  std::vector<ErrorState> samples;

  double span() const { return samples.empty() ? 0.0 : dt * (static_cast<double>(samples.size()) - 1); }
};

struct LkfWeights {
  std::vector<MatrixXd> S, R, S12;
  VectorXd h;  // per-channel delay bounds (s)
};

/// Lyapunov-Krasovskii functional along a stored history: V at the newest
/// sample plus the S-weighted state integrals and the R-weighted weighted
/// derivative integrals, trapezoidal on the grid with a linearly
/// interpolated partial first segment. p~ derivatives come from two-point
/// backward differences on the same grid.
inline double eval_LKF(const PowerNetwork& net, const DaiParams& dai, const ReducedSystem& rs,
                       const LyapunovConfig& cfg, const LkfWeights& w, const ErrorHistory& hist,
                       const VectorXd& theta_star) {
  const int nch = static_cast<int>(w.h.size());
  if (nch != static_cast<int>(w.S.size()) || nch != static_cast<int>(w.R.size()))
    throw std::invalid_argument("eval_LKF: weight count mismatch");
  if (hist.samples.empty()) throw std::invalid_argument("eval_LKF: empty history");
  const double hmax = nch ? w.h.maxCoeff() : 0.0;
  if (hist.span() + 1e-12 < hmax) throw std::invalid_argument("eval_LKF: insufficient history");

  const int ns = static_cast<int>(hist.samples.size());
  double total = eval_V(net, dai, rs, cfg, hist.samples.back(), theta_star);
  if (hmax == 0.0) return total;

  // Backward-difference derivatives on the grid.
  std::vector<VectorXd> pdot(ns);
  for (int j = 1; j < ns; ++j) pdot[j] = (hist.samples[j].p_t - hist.samples[j - 1].p_t) / hist.dt;
  if (ns > 1) pdot[0] = pdot[1];
  else pdot[0] = VectorXd::Zero(hist.samples[0].p_t.size());

  // Trapezoid of f over [t - h, t] given f at grid nodes (index ns-1 = t).
  auto trapezoid = [&](const std::vector<double>& f, double h) {
    if (h <= 0.0) return 0.0;
    const double a = hist.span() - h;  // lower limit in grid time
    int j0 = static_cast<int>(std::ceil(a / hist.dt - 1e-12));
    double acc = 0.0;
    for (int j = j0; j + 1 < ns; ++j) acc += 0.5 * (f[j] + f[j + 1]) * hist.dt;
    if (j0 > 0) {
      const double sj0 = j0 * hist.dt;
      if (sj0 > a + 1e-15) {
        const double u = (sj0 - a) / hist.dt;  // partial segment [a, s_j0]
        const double fa = f[j0] * (1 - u) + f[j0 - 1] * u;
        acc += 0.5 * (fa + f[j0]) * (sj0 - a);
      }
    }
    return acc;
  };

  std::vector<double> f(ns);
  for (int m = 0; m < nch; ++m) {
    const double hm = w.h(m);
    if (hm == 0.0) continue;
    for (int j = 0; j < ns; ++j) f[j] = hist.samples[j].p_t.dot(w.S[m] * hist.samples[j].p_t);
    total += trapezoid(f, hm);
    // Weight (h_m + s - t) rises linearly from 0 at the lower limit to h_m at t.
    const double t_grid = hist.span();
    for (int j = 0; j < ns; ++j) {
      const double weight = hm + (j * hist.dt - t_grid);
      f[j] = weight <= 0.0 ? 0.0 : weight * pdot[j].dot(w.R[m] * pdot[j]);
    }
    total += hm * trapezoid(f, hm);
  }
  return total;
}

}  // namespace dai
