#pragma once

// Scheduled operating points and post-disturbance equilibria.

#include <cmath>
#include <utility>

#include <Eigen/Dense>

#include "gridctl/ndae.hpp"

namespace gridctl {

struct OperatingPoint {
  VectorXd x_d_k;
  VectorXd x_a_k;
  VectorXd u_ref_k;
  VectorXd q_k;
  double residual_norm = 0.0;
};

namespace detail {

/// Machine steady state from terminal conditions. Exact angle from the
/// two-axis phasor relation, then a 1-D Newton polish on the active-power
/// equation; the |delta - theta| < pi/2 branch is the stable one.
struct MachineInit {
  double delta, eprime, efd;
};

inline MachineInit machine_steady_state(double pg, double qg, double v, double theta,
                                        double xd, double xq, double xdp) {
  const double phi0 = std::atan2(pg * xq, qg * xq + v * v);
  const double kq = (xq - xdp) / (2.0 * xdp * xq);
  auto eprime_of = [&](double phi) {
    // reactive-power equation solved for E' (well conditioned near phi = 0)
    const double kpq = (xdp + xq) / (2.0 * xdp * xq);
    return (qg + kpq * v * v + kq * v * v * std::cos(2 * phi)) * xdp / (v * std::cos(phi));
  };
  double phi = phi0;
  for (int it = 0; it < 8; ++it) {
    const double ep = eprime_of(phi);
    const double g = -pg + ep * v * std::sin(phi) / xdp - kq * v * v * std::sin(2 * phi);
    if (std::abs(g) < 1e-13) break;
    const double step = 1e-7;
    const double gp =
        (-pg + eprime_of(phi + step) * v * std::sin(phi + step) / xdp -
         kq * v * v * std::sin(2 * (phi + step)) - g) / step;
    if (gp == 0.0) break;
    double dphi = -g / gp;
    if (std::abs(dphi) > 0.5) dphi = dphi > 0 ? 0.5 : -0.5;
    phi += dphi;
  }
  if (std::abs(phi) >= std::numbers::pi / 2)
    throw ConvergenceError("machine angle init left the stable branch");
  MachineInit mi;
  mi.delta = theta + phi;
  mi.eprime = eprime_of(phi);
  return mi;
}

}  // namespace detail

/// Scheduled equilibrium from a power-flow solution: x_a from the PF,
/// machine states in closed form (omega = omega0, T_M = P_G, T_r = T_M,
/// E_fd from the flux equation at rest).
inline OperatingPoint steady_state(const NdaeModel& m, const PfSolution& pf,
                                   const VectorXd& q_k) {
  const int G = m.idx.n_gen, N = m.idx.n_bus;
  OperatingPoint op;
  op.q_k = q_k;
  op.x_a_k.resize(m.n_a());
  op.x_d_k.resize(m.n_d());
  op.u_ref_k.resize(m.n_u());
  for (int k = 0; k < G; ++k) {
    const int b = m.idx.gen_bus[k];
    const Bus& bus = m.net.buses[b];
    const double pg = pf.p_inj(b) + bus.p_load - bus.p_ren;
    const double qg = pf.q_inj(b) + bus.q_load - bus.q_ren;
    op.x_a_k(m.idx.pg0() + k) = pg;
    op.x_a_k(m.idx.qg0() + k) = qg;
    const detail::MachineInit mi = detail::machine_steady_state(
        pg, qg, pf.v(b), pf.theta(b), m.xd(k), m.xq(k), m.xdp(k));
    op.x_d_k(m.idx.delta0() + k) = mi.delta;
    op.x_d_k(m.idx.omega0_() + k) = m.omega0;
    op.x_d_k(m.idx.eprime0() + k) = mi.eprime;
    op.x_d_k(m.idx.tm0() + k) = pg;   // swing equation at rest
    const double phi = mi.delta - pf.theta(b);
    op.u_ref_k(m.idx.efd0() + k) = m.xd(k) / m.xdp(k) * mi.eprime -
                                   (m.xd(k) - m.xdp(k)) / m.xdp(k) * pf.v(b) * std::cos(phi);
    op.u_ref_k(m.idx.tr0() + k) = pg;  // governor at rest
  }
  op.x_a_k.segment(m.idx.v0(), N) = pf.v;
  op.x_a_k.segment(m.idx.theta0(), N) = pf.theta;

  const Residual r = eval_residual(m, op.x_d_k, VectorXd::Zero(m.n_d()), op.x_a_k,
                                   op.u_ref_k, q_k);
  op.residual_norm = std::max(r.r_d.lpNorm<Eigen::Infinity>(), r.r_a.lpNorm<Eigen::Infinity>());
  if (op.residual_norm > 1e-8)
    throw ConvergenceError("steady_state residual " + std::to_string(op.residual_norm) +
                           " exceeds 1e-8");
  return op;
}

/// Solves the closed-loop rest equations under u = u_ref + K_d (x_d - x_d^k)
/// by damped Newton from the scheduled point. Throws ConvergenceError when
/// the disturbance leaves the warm-start basin (no reachable equilibrium).
inline std::pair<VectorXd, VectorXd> post_disturbance_equilibrium(
    const NdaeModel& m, const MatrixXd& K_d, const OperatingPoint& op_k, const VectorXd& q_e,
    double tol = 1e-10, int max_iter = 120) {
  if (K_d.rows() != m.n_u() || K_d.cols() != m.n_d())
    throw std::invalid_argument("post_disturbance_equilibrium: gain shape mismatch");
  detail::check_finite(q_e, "q_e");
  const int nd = m.n_d(), na = m.n_a();
  VectorXd x_d = op_k.x_d_k, x_a = op_k.x_a_k;
  auto residual = [&](const VectorXd& xd, const VectorXd& xa) {
    const VectorXd u = op_k.u_ref_k + K_d * (xd - op_k.x_d_k);
    VectorXd F(nd + na);
    F.head(nd) = m.dynamic_rhs(xd, xa, u);
    F.tail(na) = m.algebraic_residual(xd, xa, q_e);
    return F;
  };
  VectorXd F = residual(x_d, x_a);
  for (int it = 0; it < max_iter; ++it) {
    const double fnorm = F.lpNorm<Eigen::Infinity>();
    if (fnorm <= tol) return {x_d, x_a};
    const Jacobians J = eval_jacobians(m, x_d, x_a, op_k.u_ref_k);
    MatrixXd A(nd + na, nd + na);
    A.topLeftCorner(nd, nd) = J.f_xd + m.B_d * K_d;
    A.topRightCorner(nd, na) = J.f_xa;
    A.bottomLeftCorner(na, nd) = J.g_xd;
    A.bottomRightCorner(na, na) = J.g_xa;
    Eigen::PartialPivLU<MatrixXd> lu(A);
    const VectorXd dz = lu.solve(-F);
    if (!dz.allFinite())
      throw ConvergenceError("post_disturbance_equilibrium: singular Jacobian");
    double lambda = 1.0;
    VectorXd x_d_n, x_a_n, F_n;
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      x_d_n = x_d + lambda * dz.head(nd);
      x_a_n = x_a + lambda * dz.tail(na);
      F_n = residual(x_d_n, x_a_n);
      if (F_n.allFinite() && F_n.lpNorm<Eigen::Infinity>() < fnorm) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted)
      throw ConvergenceError(
          "post_disturbance_equilibrium: Newton stalled (disturbance outside the "
          "warm-start basin)");
    x_d = x_d_n;
    x_a = x_a_n;
    F = F_n;
  }
  throw ConvergenceError("post_disturbance_equilibrium: no convergence in " +
                         std::to_string(max_iter) + " iterations");
}

}  // namespace gridctl
