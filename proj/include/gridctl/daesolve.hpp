#pragma once

// Implicit trapezoidal integration of the closed-loop index-1 NDAE with
// consistent initialization.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gridctl/equilibrium.hpp"
#include "gridctl/ndae.hpp"

namespace gridctl {

/// Affine feedback policy. Covers the boxed LRFC law, the LQR baseline,
/// open loop, and the AGC (whose integrator state chi is advanced alongside
/// the plant):
///   u    = u0 + K_d x_d + K_a x_a + K_chi chi
///   chi' = c0 + C_d x_d + C_a x_a + C_chi chi
struct Controller {
  std::string kind = "open-loop";
  VectorXd u0;
  MatrixXd K_d, K_a, K_chi;
  VectorXd c0;
  MatrixXd C_d, C_a, C_chi;
  VectorXd chi;  // internal dynamic state (empty when stateless)

  int n_state() const { return static_cast<int>(chi.size()); }

  VectorXd evaluate(double /*t*/, const VectorXd& x_d, const VectorXd& x_a) const {
    VectorXd u = u0 + K_d * x_d + K_a * x_a;
    if (n_state() > 0) u += K_chi * chi;
    return u;
  }

  VectorXd chi_dot(const VectorXd& x_d, const VectorXd& x_a, const VectorXd& c) const {
    if (n_state() == 0) return VectorXd();
    return c0 + C_d * x_d + C_a * x_a + C_chi * c;
  }

  static Controller open_loop(const VectorXd& u_ref, int n_d, int n_a) {
    Controller ctl;
    ctl.kind = "open-loop";
    ctl.u0 = u_ref;
    ctl.K_d = MatrixXd::Zero(u_ref.size(), n_d);
    ctl.K_a = MatrixXd::Zero(u_ref.size(), n_a);
    return ctl;
  }
};

struct StepReport {
  double t = 0.0;
  int newton_iterations = 0;
  double step_residual = 0.0;
  double alg_residual = 0.0;
};

struct Trajectory {
  std::vector<double> t;
  MatrixXd X_d;  // steps x n_d
  MatrixXd X_a;  // steps x n_a
  MatrixXd U;    // steps x n_u
  MatrixXd Q;    // steps x n_q
  MatrixXd Chi;  // steps x n_chi
  std::vector<StepReport> step_report;
  bool converged = true;
  double blowup_time = -1.0;
  std::string failure;

  int steps() const { return static_cast<int>(t.size()); }
  /// Index of the grid point nearest t_query.
  int nearest(double t_query) const {
    int best = 0;
    double d = std::abs(t[0] - t_query);
    for (int i = 1; i < steps(); ++i)
      if (std::abs(t[i] - t_query) < d) {
        d = std::abs(t[i] - t_query);
        best = i;
      }
    return best;
  }
};

struct IntegrateOptions {
  double dt = 1e-3;
  double dt_min = 1e-6;
  double step_tol = 1e-9;
  double alg_tol = 1e-9;
  int max_newton = 25;
  double omega_blowup = 20.0;  // rad/s deviation that counts as divergence
  int record_stride = 1;
};

using QSignal = std::function<VectorXd(double)>;

/// Newton solve of the algebraic block 0 = r_a(x_d0, x_a, q) from a guess.
inline VectorXd consistent_init(const NdaeModel& m, const VectorXd& x_d0, const VectorXd& q,
                                const VectorXd& guess, double alg_tol = 1e-10,
                                int max_iter = 60) {
  detail::check_size(guess, m.n_a(), "guess");
  VectorXd x_a = guess;
  double fnorm = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const VectorXd r = m.algebraic_residual(x_d0, x_a, q);
    fnorm = r.lpNorm<Eigen::Infinity>();
    if (fnorm <= alg_tol) return x_a;
    const Jacobians J = eval_jacobians(m, x_d0, x_a, VectorXd::Zero(m.n_u()));
    Eigen::FullPivLU<MatrixXd> lu(J.g_xa);
    if (!lu.isInvertible())
      throw ConvergenceError("consistent_init: singular algebraic Jacobian");
    const VectorXd dx = lu.solve(-r);
    double lambda = 1.0;
    for (int half = 0; half < 40; ++half) {
      const VectorXd x_try = x_a + lambda * dx;
      const VectorXd r_try = m.algebraic_residual(x_d0, x_try, q);
      if (r_try.allFinite() && r_try.lpNorm<Eigen::Infinity>() < fnorm) {
        x_a = x_try;
        break;
      }
      lambda *= 0.5;
      if (half == 39) throw ConvergenceError("consistent_init: line search stalled");
    }
  }
  throw ConvergenceError("consistent_init: no convergence (residual " + std::to_string(fnorm) +
                         ")");
}

namespace detail {

/// One implicit trapezoidal step on the stacked unknowns [x_d; chi; x_a].
/// The chi rows are scaled by row_scale for well-conditioned tolerances
/// (the AGC integrator gain is large). Returns false on Newton failure.
inline bool trapezoidal_step(const NdaeModel& m, const Controller& ctl, double t_new,
                             double dt, const VectorXd& xd_c, const VectorXd& chi_c,
                             const VectorXd& xa_c, const VectorXd& f_c, const VectorXd& g_c,
                             const VectorXd& q_new, const IntegrateOptions& opt,
                             const VectorXd& chi_scale, VectorXd& xd_n, VectorXd& chi_n,
                             VectorXd& xa_n, StepReport& rep) {
  const int nd = m.n_d(), na = m.n_a(), nchi = ctl.n_state();
  xd_n = xd_c;
  chi_n = chi_c;
  xa_n = xa_c;
  for (int it = 0; it < opt.max_newton; ++it) {
    VectorXd u_n = ctl.u0 + ctl.K_d * xd_n + ctl.K_a * xa_n;
    if (nchi > 0) u_n += ctl.K_chi * chi_n;
    const VectorXd f_n = m.dynamic_rhs(xd_n, xa_n, u_n);
    const VectorXd g_n = ctl.chi_dot(xd_n, xa_n, chi_n);
    VectorXd F(nd + nchi + na);
    F.head(nd) = xd_n - xd_c - 0.5 * dt * (f_n + f_c);
    for (int i = 0; i < nchi; ++i)
      F(nd + i) = (chi_n(i) - chi_c(i) - 0.5 * dt * (g_n(i) + g_c(i))) * chi_scale(i);
    F.tail(na) = m.algebraic_residual(xd_n, xa_n, q_new);
    const double fnorm = F.lpNorm<Eigen::Infinity>();
    rep.newton_iterations = it;
    rep.step_residual = F.head(nd + nchi).lpNorm<Eigen::Infinity>();
    rep.alg_residual = F.tail(na).lpNorm<Eigen::Infinity>();
    if (!F.allFinite()) return false;
    if (rep.step_residual <= opt.step_tol && rep.alg_residual <= opt.alg_tol) return true;
    const Jacobians J = eval_jacobians(m, xd_n, xa_n, u_n);
    MatrixXd A = MatrixXd::Zero(nd + nchi + na, nd + nchi + na);
    const MatrixXd fd = J.f_xd + m.B_d * ctl.K_d;
    const MatrixXd fa = J.f_xa + m.B_d * ctl.K_a;
    A.topLeftCorner(nd, nd) = MatrixXd::Identity(nd, nd) - 0.5 * dt * fd;
    A.block(0, nd + nchi, nd, na) = -0.5 * dt * fa;
    if (nchi > 0) {
      A.block(0, nd, nd, nchi) = -0.5 * dt * (m.B_d * ctl.K_chi);
      A.block(nd, 0, nchi, nd) = -0.5 * dt * chi_scale.asDiagonal() * ctl.C_d;
      A.block(nd, nd, nchi, nchi) =
          chi_scale.asDiagonal() * (MatrixXd::Identity(nchi, nchi) - 0.5 * dt * ctl.C_chi);
      A.block(nd, nd + nchi, nchi, na) = -0.5 * dt * chi_scale.asDiagonal() * ctl.C_a;
    }
    A.block(nd + nchi, 0, na, nd) = J.g_xd;
    A.block(nd + nchi, nd + nchi, na, na) = J.g_xa;
    Eigen::PartialPivLU<MatrixXd> lu(A);
    const VectorXd dz = lu.solve(-F);
    if (!dz.allFinite()) return false;
    xd_n += dz.head(nd);
    if (nchi > 0) chi_n += dz.segment(nd, nchi);
    xa_n += dz.tail(na);
  }
  return false;
}

}  // namespace detail

/// Trapezoidal (order 2) integration with a monolithic per-step Newton on
/// the stacked dynamic/algebraic unknowns. The step is halved on Newton
/// failure down to dt_min; exhausting that, or a rotor-speed excursion
/// beyond omega_blowup, marks the trajectory diverged.
inline Trajectory integrate(const NdaeModel& m, Controller& ctl, const VectorXd& x_d0,
                            const VectorXd& x_a0, const QSignal& q_of_t, double horizon,
                            const IntegrateOptions& opt = {}) {
  detail::check_size(x_d0, m.n_d(), "x_d0");
  detail::check_size(x_a0, m.n_a(), "x_a0");
  if (!(opt.dt > 0.0)) throw std::invalid_argument("integrate: dt must be positive");
  const int nd = m.n_d(), na = m.n_a(), nu = m.n_u(), nchi = ctl.n_state();
  const int n_steps = static_cast<int>(std::llround(horizon / opt.dt));
  const int n_rec = n_steps / opt.record_stride + 2;

  Trajectory traj;
  traj.X_d.resize(n_rec, nd);
  traj.X_a.resize(n_rec, na);
  traj.U.resize(n_rec, nu);
  traj.Q.resize(n_rec, m.n_q());
  traj.Chi.resize(n_rec, nchi);
  traj.step_report.reserve(n_steps);

  VectorXd chi_scale(nchi);
  for (int i = 0; i < nchi; ++i)
    chi_scale(i) = 1.0 / std::max(1.0, ctl.C_chi.row(i).lpNorm<Eigen::Infinity>());

  VectorXd xd_c = x_d0, xa_c = x_a0, chi_c = ctl.chi;
  double t = 0.0;
  int rec = 0;
  auto record = [&](double tt, const VectorXd& q) {
    traj.t.push_back(tt);
    traj.X_d.row(rec) = xd_c;
    traj.X_a.row(rec) = xa_c;
    ctl.chi = chi_c;
    traj.U.row(rec) = ctl.evaluate(tt, xd_c, xa_c);
    traj.Q.row(rec) = q;
    if (nchi > 0) traj.Chi.row(rec) = chi_c;
    ++rec;
  };
  record(0.0, q_of_t(0.0));

  int step = 0;
  while (step < n_steps) {
    double dt = opt.dt;
    const double t_target = t + opt.dt;
    bool advanced = false;
    // on failure, retry the same macro step with halved dt until dt_min
    while (true) {
      const double t_new = t + dt;
      const VectorXd q_new = q_of_t(t_new);
      ctl.chi = chi_c;
      const VectorXd u_c = ctl.evaluate(t, xd_c, xa_c);
      const VectorXd f_c = m.dynamic_rhs(xd_c, xa_c, u_c);
      const VectorXd g_c = ctl.chi_dot(xd_c, xa_c, chi_c);
      VectorXd xd_n, chi_n, xa_n;
      StepReport rep;
      rep.t = t_new;
      if (detail::trapezoidal_step(m, ctl, t_new, dt, xd_c, chi_c, xa_c, f_c, g_c, q_new, opt,
                                   chi_scale, xd_n, chi_n, xa_n, rep)) {
        traj.step_report.push_back(rep);
        xd_c = xd_n;
        chi_c = chi_n;
        xa_c = xa_n;
        t = t_new;
        advanced = true;
        const double w_dev =
            (xd_c.segment(m.idx.omega0_(), m.idx.n_gen).array() - m.omega0).abs().maxCoeff();
        if (w_dev > opt.omega_blowup) {
          traj.converged = false;
          traj.blowup_time = t;
          traj.failure = "rotor speed deviation exceeded " + std::to_string(opt.omega_blowup) +
                         " rad/s";
          ctl.chi = chi_c;
          return traj;
        }
        if (std::abs(t - t_target) < 0.5 * opt.dt_min) break;  // macro step complete
        dt = std::min(dt, t_target - t);
      } else {
        dt *= 0.5;
        if (dt < opt.dt_min) {
          traj.converged = false;
          traj.blowup_time = t;
          traj.failure = "Newton failure at dt_min";
          ctl.chi = chi_c;
          return traj;
        }
      }
    }
    (void)advanced;
    ++step;
    if (step % opt.record_stride == 0 || step == n_steps) record(t, q_of_t(t));
  }
  traj.X_d.conservativeResize(rec, nd);
  traj.X_a.conservativeResize(rec, na);
  traj.U.conservativeResize(rec, nu);
  traj.Q.conservativeResize(rec, m.n_q());
  traj.Chi.conservativeResize(rec, nchi);
  ctl.chi = chi_c;
  return traj;
}

}  // namespace gridctl
