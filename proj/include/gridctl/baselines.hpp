#pragma once

// The LRFC controller object and the two comparison controllers: AGC with
// an integral state, and LQR on the linearized reduced model.

#include <cmath>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "gridctl/daesolve.hpp"
#include "gridctl/equilibrium.hpp"
#include "gridctl/ndae.hpp"

namespace gridctl {

/// The boxed feedback law u = u_ref^k + K_d (x_d - x_d^k). Stateless and
/// independent of the algebraic variables.
inline Controller make_lrfc(const NdaeModel& m, const MatrixXd& K_d,
                            const OperatingPoint& op, const std::string& kind = "ndae") {
  if (K_d.rows() != m.n_u() || K_d.cols() != m.n_d())
    throw std::invalid_argument("make_lrfc: gain shape mismatch");
  Controller c;
  c.kind = kind;
  c.u0 = op.u_ref_k - K_d * op.x_d_k;
  c.K_d = K_d;
  c.K_a = MatrixXd::Zero(m.n_u(), m.n_a());
  return c;
}

struct LinearizedReducedModel {
  MatrixXd A_red;  // n_d x n_d
  MatrixXd B_red;  // n_d x n_u
  double elimination_conditioning = 0.0;  // condition estimate of the algebraic block
};

/// Eliminates the algebraic block of the Eq.-(4) Jacobians at an operating
/// point: A_red = f_xd - f_xa (g_xa)^{-1} g_xd, B_red = B_d.
inline LinearizedReducedModel linearize_and_reduce(const NdaeModel& m,
                                                   const OperatingPoint& op) {
  const Jacobians J = eval_jacobians(m, op.x_d_k, op.x_a_k, op.u_ref_k);
  Eigen::FullPivLU<MatrixXd> lu(J.g_xa);
  if (!lu.isInvertible())
    throw ConvergenceError("linearize_and_reduce: singular algebraic Jacobian");
  LinearizedReducedModel red;
  red.A_red = J.f_xd - J.f_xa * lu.solve(J.g_xd);
  red.B_red = m.B_d;
  const VectorXd sv = J.g_xa.jacobiSvd().singularValues();
  red.elimination_conditioning = sv(0) / sv(sv.size() - 1);
  return red;
}

namespace detail {

/// Continuous-time algebraic Riccati equation via the matrix sign function
/// of the Hamiltonian (Newton iteration with determinant scaling).
inline MatrixXd solve_care(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                           const MatrixXd& Rm) {
  const int n = static_cast<int>(A.rows());
  const MatrixXd Rinv = Rm.llt().solve(MatrixXd::Identity(Rm.rows(), Rm.cols()));
  MatrixXd H(2 * n, 2 * n);
  H.topLeftCorner(n, n) = A;
  H.topRightCorner(n, n) = -B * Rinv * B.transpose();
  H.bottomLeftCorner(n, n) = -Q;
  H.bottomRightCorner(n, n) = -A.transpose();

  MatrixXd Z = H;
  for (int it = 0; it < 120; ++it) {
    Eigen::PartialPivLU<MatrixXd> lu(Z);
    const MatrixXd Zinv = lu.solve(MatrixXd::Identity(2 * n, 2 * n));
    const double detz = std::abs(lu.determinant());
    const double mu = std::pow(detz, -1.0 / (2.0 * n));  // determinant scaling
    const MatrixXd Znew = 0.5 * (mu * Z + Zinv / mu);
    const double delta = (Znew - Z).norm() / std::max(1.0, Z.norm());
    Z = Znew;
    if (delta < 1e-14) break;
    if (!Z.allFinite()) throw ConvergenceError("care: sign iteration diverged");
  }
  // stable invariant subspace: columns of the kernel basis of (Z + I)
  MatrixXd ZpI = Z + MatrixXd::Identity(2 * n, 2 * n);
  Eigen::JacobiSVD<MatrixXd> svd(ZpI, Eigen::ComputeFullV);
  const MatrixXd V = svd.matrixV().rightCols(n);  // near-kernel directions
  const MatrixXd X = V.topRows(n), Y = V.bottomRows(n);
  Eigen::FullPivLU<MatrixXd> lux(X);
  if (!lux.isInvertible()) throw ConvergenceError("care: unstabilizable pair");
  MatrixXd P = Y * lux.solve(MatrixXd::Identity(n, n));
  P = 0.5 * (P + P.transpose());
  return P;
}

}  // namespace detail

/// LQR gain K = -R^{-1} B' P from the CARE on the reduced model.
inline MatrixXd lqr_gain(const LinearizedReducedModel& red, const MatrixXd& Q,
                         const MatrixXd& Rm) {
  const MatrixXd P = detail::solve_care(red.A_red, red.B_red, Q, Rm);
  const MatrixXd K = -Rm.llt().solve(red.B_red.transpose() * P);
  const double absc =
      Eigen::EigenSolver<MatrixXd>(red.A_red + red.B_red * K).eigenvalues().real().maxCoeff();
  if (!(absc < 0.0))
    throw ConvergenceError("lqr_gain: closed loop not stable (abscissa " +
                           std::to_string(absc) + ")");
  return K;
}

/// Baseline LQR design used by the comparison scenarios: Q = I with the
/// rotor-angle reference mode regularized, R = I.
inline MatrixXd default_lqr_gain(const NdaeModel& m, const OperatingPoint& op) {
  const LinearizedReducedModel red = linearize_and_reduce(m, op);
  MatrixXd Q = MatrixXd::Identity(m.n_d(), m.n_d());
  Q.topLeftCorner(m.idx.n_gen, m.idx.n_gen) += 1e-6 * MatrixXd::Identity(m.idx.n_gen,
                                                                         m.idx.n_gen);
  return lqr_gain(red, Q, MatrixXd::Identity(m.n_u(), m.n_u()));
}

/// AGC controller: the governor references track T_r_i = T_r_i^0 + K_i chi
/// with chi driven by the area control error and the total generation
/// deviation; the field-voltage rows come from the supplied LQR gain.
inline Controller make_agc(const NdaeModel& m, const OperatingPoint& op, double K_G,
                           const MatrixXd& lqr_rows_for_efd) {
  const int G = m.idx.n_gen;
  const int nd = m.n_d(), na = m.n_a(), nu = m.n_u();
  Controller c;
  c.kind = "agc";
  const VectorXd pg0 = op.x_a_k.segment(m.idx.pg0(), G);
  const double pg_total = pg0.sum();
  if (!(pg_total > 0.0)) throw std::invalid_argument("make_agc: non-positive total dispatch");
  const VectorXd participation = pg0 / pg_total;

  c.u0 = op.u_ref_k;
  c.K_d = MatrixXd::Zero(nu, nd);
  c.K_a = MatrixXd::Zero(nu, na);
  if (lqr_rows_for_efd.size() > 0) {
    if (lqr_rows_for_efd.rows() < G || lqr_rows_for_efd.cols() != nd)
      throw std::invalid_argument("make_agc: E_fd gain rows shape mismatch");
    c.K_d.topRows(G) = lqr_rows_for_efd.topRows(G);
    c.u0.head(G) = op.u_ref_k.head(G) - lqr_rows_for_efd.topRows(G) * op.x_d_k;
  }
  c.K_chi = MatrixXd::Zero(nu, 1);
  c.K_chi.col(0).segment(G, G) = participation;
  c.chi = VectorXd::Zero(1);

  // chi' = K_G (-chi - ACE + sum(P_G - P_G^0)),
  // ACE = (1/G) sum (1/R_D + D)(omega - omega0)
  const VectorXd ace_w = (m.rd.cwiseInverse() + m.D) / static_cast<double>(G);
  c.C_d = MatrixXd::Zero(1, nd);
  c.C_d.row(0).segment(m.idx.omega0_(), G) = -K_G * ace_w.transpose();
  c.C_a = MatrixXd::Zero(1, na);
  c.C_a.row(0).segment(m.idx.pg0(), G).setConstant(K_G);
  c.C_chi = MatrixXd::Constant(1, 1, -K_G);
  c.c0 = VectorXd::Constant(1, K_G * (ace_w.sum() * m.omega0 - pg_total));
  return c;
}

}  // namespace gridctl
