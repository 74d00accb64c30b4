#pragma once

// Newton-Raphson AC power flow in polar coordinates.

#include <vector>

#include <Eigen/Dense>

#include "gridctl/netcase.hpp"

namespace gridctl {

struct PfSolution {
  VectorXd v;       // pu
  VectorXd theta;   // rad, slack at 0
  VectorXd p_inj;   // pu net injections
  VectorXd q_inj;   // pu
  int iterations = 0;
  double residual_norm = 0.0;  // inf-norm of the final mismatch
};

namespace detail {

/// Net injections P_i + jQ_i = V_i * conj(sum_j Y_ij V_j).
inline void bus_injections(const AdmittanceMatrix& y, const VectorXd& v, const VectorXd& th,
                           VectorXd& p, VectorXd& q) {
  const int n = static_cast<int>(v.size());
  Eigen::VectorXcd V(n);
  for (int i = 0; i < n; ++i) V(i) = std::polar(v(i), th(i));
  const Eigen::MatrixXcd Y = y.G.cast<std::complex<double>>() +
                             std::complex<double>(0, 1) * y.B.cast<std::complex<double>>();
  const Eigen::VectorXcd S = V.array() * (Y * V).conjugate().array();
  p = S.real();
  q = S.imag();
}

/// Standard polar power-flow Jacobian blocks.
struct PfJacobian {
  MatrixXd dp_dth, dp_dv, dq_dth, dq_dv;
};

inline PfJacobian pf_jacobian(const AdmittanceMatrix& y, const VectorXd& v, const VectorXd& th) {
  const int n = static_cast<int>(v.size());
  VectorXd p(n), q(n);
  bus_injections(y, v, th, p, q);
  PfJacobian J;
  J.dp_dth.resize(n, n);
  J.dp_dv.resize(n, n);
  J.dq_dth.resize(n, n);
  J.dq_dv.resize(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const double tij = th(i) - th(j);
      const double c = std::cos(tij), s = std::sin(tij);
      const double w = v(i) * v(j) * (y.G(i, j) * c + y.B(i, j) * s);
      const double z = v(i) * v(j) * (y.G(i, j) * s - y.B(i, j) * c);
      J.dp_dth(i, j) = z;
      J.dp_dv(i, j) = w / v(j);
      J.dq_dth(i, j) = -w;
      J.dq_dv(i, j) = z / v(j);
    }
    J.dp_dth(i, i) = -q(i) - y.B(i, i) * v(i) * v(i);
    J.dp_dv(i, i) = (p(i) + y.G(i, i) * v(i) * v(i)) / v(i);
    J.dq_dth(i, i) = p(i) - y.G(i, i) * v(i) * v(i);
    J.dq_dv(i, i) = (q(i) - y.B(i, i) * v(i) * v(i)) / v(i);
  }
  return J;
}

}  // namespace detail

/// Solves the power balance with renewables as negative loads. PV-bus
/// reactive limits are not enforced. Flat start.
inline PfSolution solve_power_flow(const NetworkCase& c, const AdmittanceMatrix& y,
                                   double tol = 1e-10, int max_iter = 40) {
  const int n = c.n_bus();
  VectorXd v(n), th = VectorXd::Zero(n);
  VectorXd p_set(n), q_set(n);
  std::vector<int> ang;   // pv + pq buses (theta unknowns)
  std::vector<int> pq;    // pq buses (v unknowns)
  for (int i = 0; i < n; ++i) {
    const Bus& b = c.buses[i];
    v(i) = b.kind == BusKind::PQ ? 1.0 : b.v_set;
    p_set(i) = b.p_ren - b.p_load;
    q_set(i) = b.q_ren - b.q_load;
    if (b.kind != BusKind::Slack) ang.push_back(i);
    if (b.kind == BusKind::PQ) pq.push_back(i);
  }
  for (const GeneratorParams& g : c.generators) p_set(g.bus - 1) += g.p_sched;

  const int na = static_cast<int>(ang.size());
  const int nq = static_cast<int>(pq.size());
  VectorXd p(n), q(n);
  double mis_norm = 0.0;
  int it = 0;
  for (; it < max_iter; ++it) {
    detail::bus_injections(y, v, th, p, q);
    VectorXd mis(na + nq);
    for (int k = 0; k < na; ++k) mis(k) = p_set(ang[k]) - p(ang[k]);
    for (int k = 0; k < nq; ++k) mis(na + k) = q_set(pq[k]) - q(pq[k]);
    mis_norm = mis.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(mis_norm))
      throw ConvergenceError(c.name + ": power flow produced non-finite mismatch");
    if (mis_norm <= tol) break;
    const detail::PfJacobian J = detail::pf_jacobian(y, v, th);
    MatrixXd A(na + nq, na + nq);
    for (int r = 0; r < na; ++r) {
      for (int cc = 0; cc < na; ++cc) A(r, cc) = J.dp_dth(ang[r], ang[cc]);
      for (int cc = 0; cc < nq; ++cc) A(r, na + cc) = J.dp_dv(ang[r], pq[cc]);
    }
    for (int r = 0; r < nq; ++r) {
      for (int cc = 0; cc < na; ++cc) A(na + r, cc) = J.dq_dth(pq[r], ang[cc]);
      for (int cc = 0; cc < nq; ++cc) A(na + r, na + cc) = J.dq_dv(pq[r], pq[cc]);
    }
    Eigen::FullPivLU<MatrixXd> lu(A);
    if (!lu.isInvertible())
      throw ConvergenceError(c.name + ": singular power-flow Jacobian");
    const VectorXd dz = lu.solve(mis);
    for (int k = 0; k < na; ++k) th(ang[k]) += dz(k);
    for (int k = 0; k < nq; ++k) v(pq[k]) += dz(na + k);
  }
  if (mis_norm > tol)
    throw ConvergenceError(c.name + ": power flow did not converge in " +
                           std::to_string(max_iter) + " iterations (residual " +
                           std::to_string(mis_norm) + ")");
  detail::bus_injections(y, v, th, p, q);
  PfSolution sol;
  sol.v = v;
  sol.theta = th;
  sol.p_inj = p;
  sol.q_inj = q;
  sol.iterations = it;
  sol.residual_norm = mis_norm;
  return sol;
}

}  // namespace gridctl
