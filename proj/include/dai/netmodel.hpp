#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dai/graph.hpp"
#include "dai/linalg.hpp"

namespace dai {

/// Kron-reduced power network on the system base: per-node inertia M,
/// damping D, voltage magnitude V, active-power setpoint Pd, constant-load
/// conductance Gload, and the symmetric susceptance matrix B (off-diagonals
/// <= 0, zero diagonal). wd is the nominal frequency in rad/s.
struct PowerNetwork {
  int n = 0;
  VectorXd M;      // pu s^2, > 0
  VectorXd D;      // pu s, > 0
  VectorXd V;      // pu, > 0
  MatrixXd B;      // pu, symmetric, B(i,k) <= 0 off-diagonal, B(i,i) = 0
  VectorXd Pd;     // pu
  VectorXd Gload;  // pu, >= 0
  double wd = 1.0;

  /// P^net = col(Pd_i - G_ii V_i^2).
  VectorXd p_net() const { return Pd - Gload.cwiseProduct(V.cwiseProduct(V)); }

  Graph electrical_graph() const {
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i)
      for (int k = i + 1; k < n; ++k)
        if (B(i, k) != 0.0) edges.emplace_back(i, k);
    return Graph::from_edges(n, edges);
  }

  void validate() const {
    if (n < 1) throw std::invalid_argument("PowerNetwork: n must be >= 1");
    auto check_len = [&](const VectorXd& v, const char* name) {
      if (v.size() != n) throw std::invalid_argument(std::string("PowerNetwork: bad length for ") + name);
    };
    check_len(M, "M");
    check_len(D, "D");
    check_len(V, "V");
    check_len(Pd, "Pd");
    check_len(Gload, "Gload");
    if ((M.array() <= 0).any()) throw std::invalid_argument("PowerNetwork: M must be positive");
    if ((D.array() <= 0).any()) throw std::invalid_argument("PowerNetwork: D must be positive");
    if ((V.array() <= 0).any()) throw std::invalid_argument("PowerNetwork: V must be positive");
    if ((Gload.array() < 0).any()) throw std::invalid_argument("PowerNetwork: Gload must be nonnegative");
    if (B.rows() != n || B.cols() != n) throw std::invalid_argument("PowerNetwork: B must be n x n");
    if ((B - B.transpose()).cwiseAbs().maxCoeff() != 0.0)
      throw std::invalid_argument("PowerNetwork: B must be symmetric");
    for (int i = 0; i < n; ++i) {
      if (B(i, i) != 0.0) throw std::invalid_argument("PowerNetwork: B diagonal must be zero");
      for (int k = 0; k < n; ++k)
        if (i != k && B(i, k) > 0.0)
          throw std::invalid_argument("PowerNetwork: off-diagonal B must be <= 0");
    }
    if (n > 1 && !is_connected(electrical_graph()))
      throw std::invalid_argument("PowerNetwork: electrical graph must be connected");
  }
};

/// DAI controller parameters: cost matrix A, base gain Kcal and scalar gain
/// kappa, with K = kappa * Kcal.
struct DaiParams {
  VectorXd A;     // diagonal of the cost matrix, > 0
  VectorXd Kcal;  // diagonal of the base gain, > 0
  double kappa = 1.0;

  VectorXd K() const { return kappa * Kcal; }

  void validate() const {
    if (A.size() != Kcal.size()) throw std::invalid_argument("DaiParams: A and Kcal length mismatch");
    if ((A.array() <= 0).any()) throw std::invalid_argument("DaiParams: A must be positive");
    if ((Kcal.array() <= 0).any()) throw std::invalid_argument("DaiParams: Kcal must be positive");
    if (kappa < 0) throw std::invalid_argument("DaiParams: kappa must be >= 0");
  }
};

struct GridState {
  VectorXd theta;  // rad
  VectorXd omega;  // rad/s
  VectorXd p;      // pu
};

/// Converts a per-unit quantity given on machine bases S_machine to the
/// system base S_system (multiplies by S_machine_i / S_system).
inline VectorXd to_system_base(const VectorXd& machine_pu, const VectorXd& s_machine, double s_system) {
  return machine_pu.cwiseProduct(s_machine) / s_system;
}

/// U(theta) = -sum over unordered electrical pairs of |B_ik| V_i V_k cos(theta_i - theta_k).
inline double potential(const PowerNetwork& net, const VectorXd& theta) {
  double u = 0.0;
  for (int i = 0; i < net.n; ++i)
    for (int k = i + 1; k < net.n; ++k)
      if (net.B(i, k) != 0.0)
        u -= std::abs(net.B(i, k)) * net.V(i) * net.V(k) * std::cos(theta(i) - theta(k));
  return u;
}

/// Gradient of U; component i is the power flow P_i(theta). Flow symmetry
/// gives 1^T grad = 0 up to rounding.
inline VectorXd grad_potential(const PowerNetwork& net, const VectorXd& theta) {
  VectorXd g = VectorXd::Zero(net.n);
  for (int i = 0; i < net.n; ++i)
    for (int k = i + 1; k < net.n; ++k)
      if (net.B(i, k) != 0.0) {
        double w = std::abs(net.B(i, k)) * net.V(i) * net.V(k) * std::sin(theta(i) - theta(k));
        g(i) += w;
        g(k) -= w;
      }
  return g;
}

/// Hessian of U: a weighted Laplacian with edge weights |B_ik| V_i V_k cos(theta_ik).
inline MatrixXd hessian_potential(const PowerNetwork& net, const VectorXd& theta) {
  MatrixXd h = MatrixXd::Zero(net.n, net.n);
  for (int i = 0; i < net.n; ++i)
    for (int k = i + 1; k < net.n; ++k)
      if (net.B(i, k) != 0.0) {
        double w = std::abs(net.B(i, k)) * net.V(i) * net.V(k) * std::cos(theta(i) - theta(k));
        h(i, i) += w;
        h(k, k) += w;
        h(i, k) -= w;
        h(k, i) -= w;
      }
  return h;
}

/// Steady-state secondary injections p* = alpha A^{-1} 1 with
/// alpha = 1^T P^net / 1^T A^{-1} 1; satisfies identical marginal costs.
inline VectorXd p_star(const PowerNetwork& net, const DaiParams& dai) {
  const VectorXd ainv = dai.A.cwiseInverse();
  const double alpha = net.p_net().sum() / ainv.sum();
  return alpha * ainv;
}

/// Synchronized frequency of the closed loop under constant input u*.
inline double sync_frequency(const PowerNetwork& net, const DaiParams& /*dai*/, const VectorXd& u_star) {
  return net.wd + (net.p_net() + u_star).sum() / net.D.sum();
}

struct EquilibriumResult {
  VectorXd theta;        // gauge-fixed equilibrium angles
  bool converged = false;
  bool secure = false;   // all neighbor angle gaps strictly inside (-pi/2, pi/2)
  double residual = 0.0; // infinity norm of grad U - (P^net - p*)
  double max_angle_gap = 0.0;
  int iterations = 0;
  std::string warning;
};

/// Solves grad U(theta*) = P^net - p* by damped Newton with the singular
/// direction 1 projected out, then shifts theta* so 1^T A^{-1} theta*
/// matches the guess (the zeta gauge). Security violations are returned as
/// a warning, not an error: stressed equilibria sit on the pi/2 boundary.
inline EquilibriumResult equilibrium_solve(const PowerNetwork& net, const DaiParams& dai,
                                           const VectorXd& theta_guess, int max_iter = 50,
                                           double tol = 1e-10) {
  EquilibriumResult res;
  const VectorXd rhs = net.p_net() - p_star(net, dai);
  VectorXd theta = theta_guess;
  const int n = net.n;
  const MatrixXd ones_reg = MatrixXd::Ones(n, n) / n;

  double resid = (grad_potential(net, theta) - rhs).lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; it < max_iter && resid > tol; ++it) {
    VectorXd f = grad_potential(net, theta) - rhs;
    MatrixXd jac = hessian_potential(net, theta) + ones_reg;  // kernel 1 projected out
    VectorXd step = jac.ldlt().solve(f);
    step.array() -= step.mean();  // stay in the zero-sum subspace
    double alpha = 1.0;
    bool accepted = false;
    for (int halving = 0; halving <= 10; ++halving) {
      VectorXd cand = theta - alpha * step;
      double next = (grad_potential(net, cand) - rhs).lpNorm<Eigen::Infinity>();
      if (std::isfinite(next) && next < resid) {
        theta = cand;
        resid = next;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {  // take the smallest damped step and keep iterating
      theta -= alpha * step;
      resid = (grad_potential(net, theta) - rhs).lpNorm<Eigen::Infinity>();
    }
  }

  // Gauge: power flow is shift-invariant; pin the 1^T A^{-1} theta component
  // to the guess so reduced-coordinate conversions are exact.
  const VectorXd ainv = dai.A.cwiseInverse();
  const double shift = ainv.dot(theta_guess - theta) / ainv.sum();
  theta.array() += shift;

  res.theta = theta;
  res.iterations = it;
  res.residual = (grad_potential(net, theta) - rhs).lpNorm<Eigen::Infinity>();
  res.converged = res.residual <= tol;
  res.secure = true;
  for (int i = 0; i < n; ++i)
    for (int k = i + 1; k < n; ++k)
      if (net.B(i, k) != 0.0) {
        double gap = std::abs(theta(i) - theta(k));
        res.max_angle_gap = std::max(res.max_angle_gap, gap);
        if (gap >= M_PI / 2) res.secure = false;
      }
  if (!res.converged) res.warning = "equilibrium solve did not reach tolerance";
  else if (!res.secure) res.warning = "security constraint |theta_ik| < pi/2 violated";
  return res;
}

/// Right-hand side of the switched delayed closed loop in original
/// coordinates. delayed_p[m] supplies p evaluated at t - tau_m for channel m
/// of topology ell; passing the current p for every channel gives the
/// nominal (delay-free) vector field.
inline GridState closed_loop_rhs(const PowerNetwork& net, const DaiParams& dai, const GridState& state,
                                 const std::vector<VectorXd>& delayed_p, int ell,
                                 const TopologySet& ts,
                                 const std::vector<std::vector<MatrixXd>>& channel_mats) {
  const int n = net.n;
  if (state.theta.size() != n || state.omega.size() != n || state.p.size() != n)
    throw std::invalid_argument("closed_loop_rhs: state dimension mismatch");
  if (static_cast<int>(delayed_p.size()) != ts.num_channels())
    throw std::invalid_argument("closed_loop_rhs: delayed_p channel count mismatch");
  if (ell < 0 || ell >= ts.num_topologies())
    throw std::invalid_argument("closed_loop_rhs: invalid topology index");

  GridState d;
  d.theta = state.omega;
  const VectorXd wtilde = state.omega.array() - net.wd;
  d.omega = (-net.D.cwiseProduct(wtilde) + net.p_net() - grad_potential(net, state.theta) - state.p)
                .cwiseQuotient(net.M);
  VectorXd consensus = VectorXd::Zero(n);
  for (int m = 0; m < ts.num_channels(); ++m) {
    if (!ts.membership[ell][m]) continue;
    if (delayed_p[m].size() != n) throw std::invalid_argument("closed_loop_rhs: delayed_p size mismatch");
    consensus += channel_mats[ell][m] * dai.A.cwiseProduct(delayed_p[m]);
  }
  const VectorXd k = dai.K();
  d.p = k.cwiseProduct(wtilde) - k.cwiseProduct(dai.A.cwiseProduct(consensus));
  return d;
}

}  // namespace dai
