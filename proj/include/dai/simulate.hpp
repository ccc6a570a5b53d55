#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dai/linalg.hpp"
#include "dai/netmodel.hpp"
#include "dai/reduction.hpp"
#include "dai/rng.hpp"

namespace dai {

/// Piecewise-constant fast-varying delay signal: i.i.d. uniform on [0, h],
/// redrawn every Ts and held in between. Samples are generated counter-based
/// from the seed, so lookups are O(1), storage-free, and reproducible.
struct DelayRealization {
  double h = 0.0;
  double Ts = 1.0;
  std::uint64_t seed = 0;
  bool constant = false;
  double constant_value = 0.0;

  double at(double t) const {
    if (constant) return constant_value;
    if (h <= 0.0) return 0.0;
    const auto j = static_cast<std::uint64_t>(std::max(0.0, std::floor(t / Ts)));
    SplitMix64 g(derive_seed(seed, j));
    return h * g.next_unit();
  }
};

inline DelayRealization make_delay(double h, double Ts, std::uint64_t seed) {
  if (h < 0.0 || Ts <= 0.0) throw std::invalid_argument("make_delay: need h >= 0 and Ts > 0");
  DelayRealization d;
  d.h = h;
  d.Ts = Ts;
  d.seed = seed;
  return d;
}

inline DelayRealization make_constant_delay(double tau) {
  if (tau < 0.0) throw std::invalid_argument("make_constant_delay: need tau >= 0");
  DelayRealization d;
  d.h = tau;
  d.constant = true;
  d.constant_value = tau;
  return d;
}

/// Random topology index, redrawn every dwell seconds (uniform over the
/// family), counter-based like DelayRealization.
struct SwitchSchedule {
  double dwell = 0.5;
  int num_topologies = 1;
  std::uint64_t seed = 0;

  int at(double t) const {
    if (num_topologies <= 1) return 0;
    const auto j = static_cast<std::uint64_t>(std::max(0.0, std::floor(t / dwell)));
    SplitMix64 g(derive_seed(seed ^ 0x5D3F7C92B1E8A654ULL, j));
    return static_cast<int>(g.next_index(static_cast<std::uint64_t>(num_topologies)));
  }
};

inline SwitchSchedule make_switch_schedule(double dwell, int num_topologies, std::uint64_t seed) {
  if (dwell <= 0.0 || num_topologies < 1)
    throw std::invalid_argument("make_switch_schedule: need dwell > 0 and at least one topology");
  return SwitchSchedule{dwell, num_topologies, seed};
}

enum class Verdict { Converged, LimitCycle, Diverged, Timeout };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Converged: return "converged";
    case Verdict::LimitCycle: return "limit-cycle";
    case Verdict::Diverged: return "diverged";
    case Verdict::Timeout: return "timeout";
  }
  return "?";
}

/// Time-stamped samples of a simulated run, recorded every `stride` steps
/// (plus the final step), together with the realized delay and switching
/// signals.
struct Trajectory {
  double dt = 0.0;
  int stride = 1;
  std::vector<double> times;
  std::vector<VectorXd> state;   // full state per sample
  std::vector<int> ell;          // active topology per sample
  std::vector<VectorXd> tau;     // realized per-channel delay per sample
  Verdict verdict = Verdict::Timeout;
  int state_dim = 0;
  int nodes = 0;                 // original-coordinate runs: n; else 0

  VectorXd theta_at(int s) const { return state[s].segment(0, nodes); }
  VectorXd omega_at(int s) const { return state[s].segment(nodes, nodes); }
  VectorXd p_at(int s) const { return state[s].segment(2 * nodes, state_dim - 2 * nodes); }
};

namespace detail {

/// Fixed-step classical RK4 for delay systems. The delayed quantity is the
/// trailing slice [delayed_offset, end) of the state; its history is kept
/// as (value, derivative) pairs on the step grid and evaluated with cubic
/// Hermite interpolation. Delay lookups that land inside the current step
/// use the latest stage slope, which reduces to classical RK4 exactly when
/// all delays are zero. Delays and the topology index are sampled at the
/// start of each step and held, matching their piecewise-constant
/// construction (requires dt <= Ts).
class DdeEngine {
 public:
  using Rhs = std::function<VectorXd(double t, const VectorXd& x, const std::vector<VectorXd>& delayed,
                                     int ell)>;

  DdeEngine(int state_dim, int delayed_offset, Rhs rhs, std::vector<DelayRealization> delays,
            SwitchSchedule schedule, double dt)
      : state_dim_(state_dim),
        off_(delayed_offset),
        slice_(state_dim - delayed_offset),
        rhs_(std::move(rhs)),
        delays_(std::move(delays)),
        schedule_(std::move(schedule)),
        dt_(dt) {
    double maxh = 0.0;
    for (const auto& d : delays_) maxh = std::max(maxh, d.h);
    cap_ = static_cast<int>(std::ceil(maxh / dt_)) + 2;
    hist_v_.assign(cap_, VectorXd::Zero(slice_));
    hist_d_.assign(cap_, VectorXd::Zero(slice_));
  }

  Trajectory run(const VectorXd& x0, double t_end, int stride) {
    if (x0.size() != state_dim_) throw std::invalid_argument("integrate: bad initial state size");
    const int nsteps = static_cast<int>(std::llround(t_end / dt_));
    const int nch = static_cast<int>(delays_.size());

    Trajectory traj;
    traj.dt = dt_;
    traj.stride = stride;
    traj.state_dim = state_dim_;
    traj.verdict = Verdict::Timeout;

    x_ = x0;
    p0_ = x0.segment(off_, slice_);
    hist_v_[0] = p0_;  // grid point 0; derivative settled by step 0's stage 1
    std::vector<VectorXd> delayed(nch, VectorXd(slice_));
    VectorXd tau_now(nch);

    for (int j = 0; j <= nsteps; ++j) {
      const double t = j * dt_;
      const int ell = schedule_.at(t);
      for (int m = 0; m < nch; ++m) tau_now(m) = delays_[m].at(t);

      if (!x_.allFinite()) {
        traj.verdict = Verdict::Diverged;
        break;
      }
      if (j % stride == 0 || j == nsteps) {
        traj.times.push_back(t);
        traj.state.push_back(x_);
        traj.ell.push_back(ell);
        traj.tau.push_back(tau_now);
      }
      if (j == nsteps) break;

      step_index_ = j;
      // Stage 1 also settles the grid-point derivative at t (the slot holds
      // a provisional k4-based value written when the previous step ended).
      gather(delayed, t, tau_now, nullptr);
      VectorXd k1 = rhs_(t, x_, delayed, ell);
      hist_d_[j % cap_] = k1.segment(off_, slice_);

      VectorXd k1p = k1.segment(off_, slice_);
      gather(delayed, t + 0.5 * dt_, tau_now, &k1p);
      VectorXd k2 = rhs_(t + 0.5 * dt_, x_ + (0.5 * dt_) * k1, delayed, ell);

      VectorXd k2p = k2.segment(off_, slice_);
      gather(delayed, t + 0.5 * dt_, tau_now, &k2p);
      VectorXd k3 = rhs_(t + 0.5 * dt_, x_ + (0.5 * dt_) * k2, delayed, ell);

      VectorXd k3p = k3.segment(off_, slice_);
      gather(delayed, t + dt_, tau_now, &k3p);
      VectorXd k4 = rhs_(t + dt_, x_ + dt_ * k3, delayed, ell);

      x_ += (dt_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      hist_v_[(j + 1) % cap_] = x_.segment(off_, slice_);
      hist_d_[(j + 1) % cap_] = k4.segment(off_, slice_);
    }
    return traj;
  }

 private:
  void gather(std::vector<VectorXd>& out, double t_stage, const VectorXd& tau, const VectorXd* slope) {
    for (std::size_t m = 0; m < delays_.size(); ++m) out[m] = lookup(t_stage - tau(m), slope);
  }

  VectorXd lookup(double s, const VectorXd* slope) const {
    if (s <= 0.0) return p0_;  // constant initial history
    const double t_now = step_index_ * dt_;
    if (s >= t_now) {
      const VectorXd& pn = hist_v_[step_index_ % cap_];
      if (slope == nullptr || s == t_now) return pn;
      return pn + (s - t_now) * (*slope);
    }
    int j = static_cast<int>(std::floor(s / dt_));
    if (j >= step_index_) j = step_index_ - 1;
    const double u = s / dt_ - j;
    const VectorXd& y0 = hist_v_[j % cap_];
    const VectorXd& y1 = hist_v_[(j + 1) % cap_];
    const VectorXd& m0 = hist_d_[j % cap_];
    const VectorXd& m1 = hist_d_[(j + 1) % cap_];
    const double u2 = u * u, u3 = u2 * u;
    return (2 * u3 - 3 * u2 + 1) * y0 + ((u3 - 2 * u2 + u) * dt_) * m0 + (-2 * u3 + 3 * u2) * y1 +
           ((u3 - u2) * dt_) * m1;
  }

  int state_dim_, off_, slice_;
  Rhs rhs_;
  std::vector<DelayRealization> delays_;
  SwitchSchedule schedule_;
  double dt_;
  int cap_ = 2;
  int step_index_ = 0;
  VectorXd x_, p0_;
  std::vector<VectorXd> hist_v_, hist_d_;
};

}  // namespace detail

/// Integrates the switched nonlinear delay system in original coordinates
/// from constant initial history at x0. Requires dt <= Ts of every
/// non-constant delay signal.
inline Trajectory integrate(const PowerNetwork& net, const DaiParams& dai, const TopologySet& ts,
                            const std::vector<DelayRealization>& delays, const SwitchSchedule& schedule,
                            const GridState& x0, double dt, double t_end, int stride = 1) {
  if (static_cast<int>(delays.size()) != ts.num_channels())
    throw std::invalid_argument("integrate: one delay realization per channel required");
  for (const auto& d : delays)
    if (!d.constant && d.h > 0.0 && dt > d.Ts) throw std::invalid_argument("integrate: dt must be <= Ts");
  const int n = net.n;
  auto cmats = channel_matrices(ts);

  detail::DdeEngine::Rhs rhs = [&, cmats](double, const VectorXd& x, const std::vector<VectorXd>& delayed,
                                          int ell) -> VectorXd {
    GridState st{x.segment(0, n), x.segment(n, n), x.segment(2 * n, n)};
    GridState d = closed_loop_rhs(net, dai, st, delayed, ell, ts, cmats);
    VectorXd out(3 * n);
    out << d.theta, d.omega, d.p;
    return out;
  };

  VectorXd x(3 * n);
  x << x0.theta, x0.omega, x0.p;
  detail::DdeEngine engine(3 * n, 2 * n, rhs, delays, schedule, dt);
  Trajectory traj = engine.run(x, t_end, stride);
  traj.nodes = n;
  return traj;
}

/// Same integrator in reduced error coordinates (state theta~, omega~, p~).
inline Trajectory integrate_error(const PowerNetwork& net, const DaiParams& dai, const ReducedSystem& rs,
                                  const std::vector<DelayRealization>& delays,
                                  const SwitchSchedule& schedule, const ErrorState& x0,
                                  const VectorXd& theta_star, double dt, double t_end, int stride = 1) {
  if (static_cast<int>(delays.size()) != rs.num_channels())
    throw std::invalid_argument("integrate_error: one delay realization per channel required");
  const int n = net.n;
  const int d = rs.reduced_dim();

  detail::DdeEngine::Rhs rhs = [&](double, const VectorXd& x, const std::vector<VectorXd>& delayed,
                                   int ell) -> VectorXd {
    ErrorState st{x.segment(0, n), x.segment(n, n), x.segment(2 * n, d)};
    ErrorState dd = error_rhs(net, dai, rs, st, delayed, ell, theta_star);
    VectorXd out(2 * n + d);
    out << dd.theta_t, dd.omega_t, dd.p_t;
    return out;
  };

  VectorXd x(2 * n + d);
  x << x0.theta_t, x0.omega_t, x0.p_t;
  detail::DdeEngine engine(2 * n + d, 2 * n, rhs, delays, schedule, dt);
  Trajectory traj = engine.run(x, t_end, stride);
  traj.nodes = 0;
  traj.state_dim = 2 * n + d;
  return traj;
}

/// Classifies a completed trajectory. Converged: over the whole final
/// window both the frequency deviation and the marginal-cost spread stay
/// below tolerance. Limit cycle: bounded, not converged, and the windowed
/// oscillation amplitude steady to within 10% between consecutive windows.
inline Verdict detect_outcome(const Trajectory& traj, const PowerNetwork& net, const DaiParams& dai,
                              double tol_freq, double tol_cost, double window) {
  if (traj.verdict == Verdict::Diverged) return Verdict::Diverged;
  if (traj.nodes == 0) throw std::invalid_argument("detect_outcome: original-coordinate trajectory required");
  const int ns = static_cast<int>(traj.times.size());
  if (ns < 2) return Verdict::Timeout;
  const double sample_dt = traj.dt * traj.stride;
  const int per_window = std::max(1, static_cast<int>(std::lround(window / sample_dt)));

  auto freq_dev = [&](int s) {
    return (traj.omega_at(s).array() - net.wd).abs().maxCoeff();
  };
  auto cost_spread = [&](int s) {
    VectorXd mc = dai.A.cwiseProduct(traj.p_at(s));
    return mc.maxCoeff() - mc.minCoeff();
  };

  // Final-window convergence test (the whole trajectory if shorter).
  int w_begin = std::max(0, ns - per_window);
  bool conv = true;
  for (int s = w_begin; s < ns && conv; ++s)
    conv = freq_dev(s) < tol_freq && cost_spread(s) < tol_cost;
  if (conv && ns - w_begin >= 2) return Verdict::Converged;

  // Amplitude comparison over the last two windows.
  int w2_begin = std::max(0, ns - per_window);
  int w1_begin = std::max(0, ns - 2 * per_window);
  if (w1_begin == w2_begin) return Verdict::Timeout;
  double amp_first = 0.0, amp1 = 0.0, amp2 = 0.0;
  for (int s = 0; s < std::min(per_window, ns); ++s) amp_first = std::max(amp_first, freq_dev(s));
  for (int s = w1_begin; s < w2_begin; ++s) amp1 = std::max(amp1, freq_dev(s));
  for (int s = w2_begin; s < ns; ++s) amp2 = std::max(amp2, freq_dev(s));

  if (amp1 > 0 && std::abs(amp2 - amp1) < 0.10 * amp1) return Verdict::LimitCycle;
  if (amp2 > amp1 && (amp2 > 10.0 * std::max(amp_first, 1e-12) || amp2 > 1e3)) return Verdict::Diverged;
  return Verdict::Timeout;
}

struct EmpiricalGainResult {
  double kappa_sim = 0.0;
  bool ok = false;
  std::string message;
  std::vector<std::pair<double, bool>> probes;  // (kappa, all trials converged)
};

/// Bisection for the largest gain at which every trial realization
/// converges. `all_converge` runs the full trial set at one gain. Brackets
/// are auto-expanded; the probe log is audited for monotonicity.
inline EmpiricalGainResult empirical_max_gain(const std::function<bool(double)>& all_converge,
                                              double kappa_lo, double kappa_hi, double tol,
                                              int max_expand = 16) {
  EmpiricalGainResult res;
  auto probe = [&](double k) {
    bool st = all_converge(k);
    res.probes.emplace_back(k, st);
    return st;
  };

  bool lo_ok = probe(kappa_lo);
  for (int i = 0; i < max_expand && !lo_ok; ++i) {
    kappa_lo *= 0.5;
    lo_ok = probe(kappa_lo);
  }
  if (!lo_ok) {
    res.message = "no stable lower bracket found";
    return res;
  }
  bool hi_unstable = !probe(kappa_hi);
  for (int i = 0; i < max_expand && !hi_unstable; ++i) {
    kappa_hi *= 2.0;
    hi_unstable = !probe(kappa_hi);
  }
  if (!hi_unstable) {
    res.kappa_sim = kappa_hi;
    res.ok = true;
    res.message = "upper bracket cap reached; every probed gain was stable";
    return res;
  }

  while (kappa_hi - kappa_lo > tol) {
    double mid = 0.5 * (kappa_lo + kappa_hi);
    if (probe(mid)) kappa_lo = mid;
    else kappa_hi = mid;
  }
  res.kappa_sim = 0.5 * (kappa_lo + kappa_hi);
  res.ok = true;

  double max_stable = -std::numeric_limits<double>::infinity();
  double min_unstable = std::numeric_limits<double>::infinity();
  for (auto [k, st] : res.probes) {
    if (st) max_stable = std::max(max_stable, k);
    else min_unstable = std::min(min_unstable, k);
  }
  if (max_stable > min_unstable + tol) {
    res.ok = false;
    res.message = "non-monotone stability outcomes across probes";
  }
  return res;
}

/// CSV export: t, theta_1..n, omega_1..n, p_1..n, ell, tau_1..2E. One row
/// per recorded sample; numbers printed with full precision so identical
/// runs produce byte-identical files.
inline void write_csv(const Trajectory& traj, std::ostream& os) {
  if (traj.nodes == 0) throw std::invalid_argument("write_csv: original-coordinate trajectory required");
  const int n = traj.nodes;
  const int nch = traj.tau.empty() ? 0 : static_cast<int>(traj.tau.front().size());
  os << "t";
  for (int i = 1; i <= n; ++i) os << ",theta_" << i;
  for (int i = 1; i <= n; ++i) os << ",omega_" << i;
  for (int i = 1; i <= n; ++i) os << ",p_" << i;
  os << ",ell";
  for (int m = 1; m <= nch; ++m) os << ",tau_" << m;
  os << "\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << ',' << buf;
  };
  for (std::size_t s = 0; s < traj.times.size(); ++s) {
    std::snprintf(buf, sizeof(buf), "%.17g", traj.times[s]);
    os << buf;
    for (int i = 0; i < 3 * n; ++i) put(traj.state[s](i));
    os << ',' << traj.ell[s] + 1;  // 1-based topology index in exports
    for (int m = 0; m < nch; ++m) put(traj.tau[s](m));
    os << "\n";
  }
}

inline void write_csv(const Trajectory& traj, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_csv: cannot open " + path);
  write_csv(traj, f);
}

}  // namespace dai
