#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <future>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dai/linalg.hpp"

namespace dai::sdp {

/// One affine symmetric-matrix constraint F(y) = C + sum_k y_{var_k} A_k,
/// required to satisfy F(y) >= margin * I at a solution.
struct Term {
  int var = 0;
  MatrixXd coeff;  // symmetric
};

struct ConstraintBlock {
  MatrixXd constant;
  std::vector<Term> terms;
  double margin = 0.0;
  std::string label;

  int dim() const { return static_cast<int>(constant.rows()); }

  MatrixXd eval(const VectorXd& y) const {
    MatrixXd f = constant;
    for (const auto& t : terms) f += y(t.var) * t.coeff;
    return f;
  }
};

struct Problem {
  int num_vars = 0;
  std::vector<ConstraintBlock> blocks;

  /// Smallest slack min_i (lambda_min(F_i(y)) - margin_i); >= 0 means every
  /// constraint is met. Solver-independent (direct eigenvalue computation).
  double min_slack(const VectorXd& y) const {
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& b : blocks) worst = std::min(worst, min_eigenvalue(b.eval(y)) - b.margin);
    return worst;
  }
};

enum class SolveStatus { Feasible, Infeasible, Indeterminate };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Feasible: return "feasible";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Indeterminate: return "indeterminate";
  }
  return "?";
}

struct SolveResult {
  SolveStatus status = SolveStatus::Indeterminate;
  VectorXd y;
  double t = -std::numeric_limits<double>::infinity();        // attained common slack
  double t_upper = std::numeric_limits<double>::infinity();   // certified bound on the best slack
  double min_slack = -std::numeric_limits<double>::infinity();
  int newton_iters = 0;
  int rounds = 0;
  std::string message;
};

struct SolveOptions {
  double y_box = 1e6;       // |y_k| < y_box keeps the domain compact
  double t_box = 1e6;
  double mu_shrink = 0.12;
  int max_rounds = 80;
  int max_newton_per_round = 120;
  double center_tol = 0.25;  // squared Newton decrement at which a round ends
  double mu_min = 1e-15;
  int threads = 0;           // 0: DAI_THREADS env or hardware concurrency, capped at block count
  std::optional<VectorXd> warm_start;
};

/// Feasibility oracle interface: affine symmetric-matrix constraints over a
/// flat decision vector, answered with a max-min-eigenvalue phase-I solve.
class Oracle {
 public:
  virtual ~Oracle() = default;
  virtual SolveResult solve(const Problem& problem, const SolveOptions& opts = {}) const = 0;
  virtual std::string name() const = 0;
};

namespace detail {

inline int resolve_threads(int requested, int nblocks) {
  int t = requested;
  if (t <= 0) {
    if (const char* env = std::getenv("DAI_THREADS")) t = std::atoi(env);
    if (t <= 0) t = static_cast<int>(std::thread::hardware_concurrency());
    if (t <= 0) t = 1;
  }
  return std::max(1, std::min(t, nblocks));
}

/// Per-block scratch for the barrier Newton system. Rows of `basis` are
/// vec(A_k) for the block's terms, so the local Hessian is one GEMM.
struct BlockWork {
  const ConstraintBlock* block = nullptr;
  MatrixXd basis;        // nt x d^2, row k = vec(A_k)
  MatrixXd lifted;       // nt x d^2, row k = vec(G A_k G)
  VectorXd grad_local;   // nt
  VectorXd ht_local;     // nt (cross terms with t)
  MatrixXd h_local;      // nt x nt
  double gt = 0.0;       // d/dt contribution
  double htt = 0.0;
  bool ok = false;

  void init(const ConstraintBlock& b) {
    block = &b;
    const int d = b.dim();
    const int nt = static_cast<int>(b.terms.size());
    basis.resize(nt, d * d);
    for (int k = 0; k < nt; ++k)
      basis.row(k) = Eigen::Map<const VectorXd>(b.terms[k].coeff.data(), d * d);
    lifted.resize(nt, d * d);
    grad_local.resize(nt);
    ht_local.resize(nt);
    h_local.resize(nt, nt);
  }

  // Returns false if F(y) - (margin + t) I is not positive definite.
  bool factorize(const VectorXd& y, double t, Eigen::LLT<MatrixXd>& llt) const {
    MatrixXd s = block->eval(y);
    s.diagonal().array() -= block->margin + t;
    llt.compute(s);
    return llt.info() == Eigen::Success;
  }

  void assemble(const VectorXd& y, double t) {
    ok = false;
    Eigen::LLT<MatrixXd> llt;
    if (!factorize(y, t, llt)) return;
    const int d = block->dim();
    const int nt = static_cast<int>(block->terms.size());
    MatrixXd g = llt.solve(MatrixXd::Identity(d, d));
    for (int k = 0; k < nt; ++k) {
      Eigen::Map<const MatrixXd> a(basis.row(k).data(), d, d);
      MatrixXd gag = g * a * g;
      lifted.row(k) = Eigen::Map<const VectorXd>(gag.data(), d * d);
      grad_local(k) = -(g.cwiseProduct(a)).sum();  // -tr(G A_k)
    }
    h_local.noalias() = basis * lifted.transpose();           // tr(G A_k G A_l)
    ht_local.noalias() = -(lifted * Eigen::Map<const VectorXd>(g.data(), d * d));  // -tr(G A_k G)
    gt = g.trace();
    htt = g.squaredNorm();
    ok = true;
  }
};

}  // namespace detail

/// Reference backend: a long-step log-det barrier method on the phase-I
/// problem  maximize t  s.t.  F_i(y) - margin_i I >= t I,  |y| < y_box.
/// Feasible when a witness with nonnegative exact slack is found; infeasible
/// when the central-path duality gap certifies sup t < 0.
class BarrierOracle final : public Oracle {
 public:
  std::string name() const override { return "barrier"; }

  SolveResult solve(const Problem& problem, const SolveOptions& opts = {}) const override {
    SolveResult res;
    const int m = problem.num_vars;
    const int nb = static_cast<int>(problem.blocks.size());
    if (nb == 0) {
      res.status = SolveStatus::Feasible;
      res.y = VectorXd::Zero(m);
      res.message = "no constraints";
      return res;
    }

    // Barrier parameter: one per matrix dimension, plus the y and t boxes.
    double nu = 1.0;
    for (const auto& b : problem.blocks) nu += b.dim();
    nu += 2.0 * m;

    VectorXd y = opts.warm_start && opts.warm_start->size() == m
                     ? opts.warm_start->cwiseMax(-0.9 * opts.y_box).cwiseMin(0.9 * opts.y_box)
                     : VectorXd::Zero(m);
    double slack0 = problem.min_slack(y);
    double t = slack0 - std::max(1.0, 0.1 * std::abs(slack0));

    std::vector<detail::BlockWork> work(nb);
    for (int i = 0; i < nb; ++i) work[i].init(problem.blocks[i]);
    const int threads = detail::resolve_threads(opts.threads, nb);

    auto assemble_all = [&](const VectorXd& yv, double tv) -> bool {
      if (threads == 1 || nb == 1) {
        for (auto& w : work) {
          w.assemble(yv, tv);
          if (!w.ok) return false;
        }
        return true;
      }
      std::vector<std::future<void>> futs;
      std::atomic<int> next{0};
      for (int th = 0; th < threads; ++th)
        futs.push_back(std::async(std::launch::async, [&]() {
          for (int i = next.fetch_add(1); i < nb; i = next.fetch_add(1)) work[i].assemble(yv, tv);
        }));
      for (auto& f : futs) f.get();
      for (const auto& w : work)
        if (!w.ok) return false;
      return true;
    };

    // Strict interiority of every block at a candidate point.
    auto interior = [&](const VectorXd& yv, double tv) -> bool {
      if (yv.cwiseAbs().maxCoeff() >= opts.y_box || tv >= opts.t_box) return false;
      Eigen::LLT<MatrixXd> llt;
      for (const auto& w : work)
        if (!w.factorize(yv, tv, llt)) return false;
      return true;
    };

    auto barrier_value = [&](const VectorXd& yv, double tv, double mu) -> double {
      double val = -tv / mu;
      Eigen::LLT<MatrixXd> llt;
      for (const auto& w : work) {
        if (!w.factorize(yv, tv, llt)) return std::numeric_limits<double>::infinity();
        val -= 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
      }
      for (int k = 0; k < m; ++k) val -= std::log(opts.y_box - yv(k)) + std::log(opts.y_box + yv(k));
      val -= std::log(opts.t_box - tv);
      return val;
    };

    double mu = std::max(0.01, 0.1 * (1.0 + std::abs(t)));
    if (opts.warm_start) mu = std::max(1e-6, 0.001 * (1.0 + std::abs(t)));

    for (int round = 0; round < opts.max_rounds; ++round, mu = std::max(mu * opts.mu_shrink, opts.mu_min)) {
      res.rounds = round + 1;
      for (int it = 0; it < opts.max_newton_per_round; ++it) {
        if (!assemble_all(y, t)) {
          res.message = "lost interiority during centering";
          res.status = SolveStatus::Indeterminate;
          return res;
        }
        // Assemble gradient and Hessian of the barrier in (y, t).
        VectorXd grad = VectorXd::Zero(m + 1);
        MatrixXd hess = MatrixXd::Zero(m + 1, m + 1);
        for (const auto& w : work) {
          const auto& terms = w.block->terms;
          const int nt = static_cast<int>(terms.size());
          for (int k = 0; k < nt; ++k) {
            grad(terms[k].var) += w.grad_local(k);
            hess(terms[k].var, m) += w.ht_local(k);
            for (int l = 0; l < nt; ++l) hess(terms[k].var, terms[l].var) += w.h_local(k, l);
          }
          grad(m) += w.gt;
          hess(m, m) += w.htt;
        }
        for (int k = 0; k < m; ++k) {
          const double lo = opts.y_box + y(k), hi = opts.y_box - y(k);
          grad(k) += 1.0 / hi - 1.0 / lo;
          hess(k, k) += 1.0 / (hi * hi) + 1.0 / (lo * lo);
        }
        grad(m) += -1.0 / mu + 1.0 / (opts.t_box - t);
        hess(m, m) += 1.0 / ((opts.t_box - t) * (opts.t_box - t));
        for (int k = 0; k < m; ++k) hess(m, k) = hess(k, m);

        Eigen::LDLT<MatrixXd> ldlt(hess);
        VectorXd step = -ldlt.solve(grad);
        if (!step.allFinite()) {
          hess.diagonal().array() += 1e-10 * (1.0 + hess.diagonal().cwiseAbs().maxCoeff());
          step = -hess.ldlt().solve(grad);
        }
        const double decrement2 = -grad.dot(step);
        ++res.newton_iters;

        // Backtracking line search on the barrier merit.
        const double f0 = barrier_value(y, t, mu);
        double alpha = 1.0;
        VectorXd y_new = y;
        double t_new = t;
        for (int bt = 0; bt < 60; ++bt, alpha *= 0.5) {
          VectorXd yc = y + alpha * step.head(m);
          double tc = t + alpha * step(m);
          if (!interior(yc, tc)) continue;
          double fc = barrier_value(yc, tc, mu);
          if (fc <= f0 - 0.01 * alpha * decrement2 || fc < f0 - 1e-14 * std::abs(f0)) {
            y_new = yc;
            t_new = tc;
            break;
          }
        }
        y = y_new;
        t = t_new;
        if (decrement2 < opts.center_tol) break;
      }

      // Decision checks at (approximately) centered iterates.
      const double slack = problem.min_slack(y);
      if (slack >= 0.0) {
        res.status = SolveStatus::Feasible;
        res.y = y;
        res.t = t;
        res.min_slack = slack;
        res.t_upper = t + 2.0 * mu * nu;
        res.message = "witness found";
        return res;
      }
      const double t_ub = t + 2.0 * mu * nu;
      if (t_ub < 0.0) {
        res.status = SolveStatus::Infeasible;
        res.y = y;
        res.t = t;
        res.min_slack = slack;
        res.t_upper = t_ub;
        res.message = "duality gap certifies sup slack < 0";
        return res;
      }
      if (mu <= opts.mu_min) break;
    }

    res.y = y;
    res.t = t;
    res.min_slack = problem.min_slack(y);
    res.t_upper = t + 2.0 * mu * nu;
    res.status = SolveStatus::Indeterminate;
    std::ostringstream os;
    os << "no decision after " << res.rounds << " rounds (t=" << res.t << ", t_upper=" << res.t_upper
       << ")";
    res.message = os.str();
    return res;
  }
};

}  // namespace dai::sdp
