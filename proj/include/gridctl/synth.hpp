#pragma once

// Decentralized gain synthesis via the stabilization LMI, the fixed-gain
// closed-loop certificate, and the quadratic-bound probe.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "gridctl/daesolve.hpp"
#include "gridctl/equilibrium.hpp"
#include "gridctl/ndae.hpp"
#include "gridctl/sdp.hpp"

namespace gridctl {

/// Combined quadratic-bound matrices Hbar_d = (H_d^d)^2 + (H_d^a)^2 and
/// Hbar_a = (H_a^d)^2 + (H_a^a)^2, together with the generating scalars
/// (the experiments use scaled identities).
struct BoundingMatrices {
  MatrixXd Hbar_d, Hbar_a;
  double hd_sq = 1.0;
  double ha_sq = 1.0;

  static BoundingMatrices identity_scaled(const NdaeModel& m, double hd_sq, double ha_sq) {
    BoundingMatrices b;
    b.hd_sq = hd_sq;
    b.ha_sq = ha_sq;
    b.Hbar_d = (hd_sq + ha_sq) * MatrixXd::Identity(m.n_d(), m.n_d());
    b.Hbar_a = (hd_sq + ha_sq) * MatrixXd::Identity(m.n_a(), m.n_a());
    return b;
  }
};

struct SynthesisOptions {
  double kappa = 1e-3;
  double delta = 1e-5;           // strictness floor
  double alpha = 2.0;            // decay-rate shift on A_d during synthesis
  bool structured_polish = true; // re-solve on the detected gain structure
  bool gain_scaling = true;      // post-scale the gain to a reduced-model decay target
  double scale_max = 6.0;
  int reduced_threshold = 6000;  // variable count that triggers the reduced form
  sdp::Settings solver;

  SynthesisOptions() {
    solver.max_iters = 20000;
    solver.eps = 1e-9;
  }
};

struct SynthesisResult {
  MatrixXd X1, X2, R, Y, W;
  double eps_bar = 0.0;
  MatrixXd K_d;
  std::string status;
  double objective = 0.0;   // kappa * ||W||_2
  double gain_scale = 1.0;  // post-synthesis factor applied to W
  bool reduced = false;
  double lmi_lambda_max = 0.0;  // re-assembled block matrix
  bool feasible = false;
};

struct CertificateResult {
  MatrixXd P1, P2, P3;
  double eps = 0.0;
  double min_eig_margin = 0.0;
  bool feasible = false;
  std::string status;
};

namespace detail {

inline double spectral_norm(const MatrixXd& M) { return M.jacobiSvd().singularValues()(0); }

inline MatrixXd psd_sqrt(const MatrixXd& H) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
  VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double lambda_max_sym(const MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (M + M.transpose()));
  return es.eigenvalues().maxCoeff();
}

}  // namespace detail

/// Dense re-assembly of the synthesis block LMI at given variable values.
/// Q2 plays the role of X2 E_d' + Y (E_d = I).
inline MatrixXd assemble_synthesis_lmi(const NdaeModel& m, const BoundingMatrices& bounds,
                                       double alpha, const MatrixXd& X1, const MatrixXd& Q2,
                                       const MatrixXd& R, const MatrixXd& W, double eps_bar) {
  const int nd = m.n_d(), na = m.n_a();
  const MatrixXd Ad = m.A_d + alpha * MatrixXd::Identity(nd, nd);
  const MatrixXd sqHd = detail::psd_sqrt(bounds.Hbar_d);
  const MatrixXd sqHa = detail::psd_sqrt(bounds.Hbar_a);
  MatrixXd M = MatrixXd::Zero(2 * nd + 2 * na, 2 * nd + 2 * na);
  const int r2 = nd, r3 = nd + na, r4 = 2 * nd + na;
  M.block(0, 0, nd, nd) = Ad * X1 + X1 * Ad.transpose() + m.B_d * W +
                          W.transpose() * m.B_d.transpose() +
                          eps_bar * m.G_d * m.G_d.transpose();
  M.block(r2, 0, na, nd) = m.A_a * Q2;
  M.block(r2, r2, na, na) = R.transpose() * m.A_a.transpose() + m.A_a * R +
                            eps_bar * m.G_a * m.G_a.transpose();
  M.block(r3, 0, nd, nd) = sqHd * X1;
  M.block(r4, 0, na, nd) = sqHa * Q2;
  M.block(r4, r2, na, na) = sqHa * R;
  M.block(r3, r3, nd, nd) = -eps_bar * MatrixXd::Identity(nd, nd);
  M.block(r4, r4, na, na) = -eps_bar * MatrixXd::Identity(na, na);
  M.block(0, r2, nd, na) = M.block(r2, 0, na, nd).transpose();
  M.block(0, r3, nd, nd) = M.block(r3, 0, nd, nd).transpose();
  M.block(0, r4, nd, na) = M.block(r4, 0, na, nd).transpose();
  M.block(r2, r4, na, na) = M.block(r4, r2, na, na).transpose();
  return M;
}

namespace detail {

using StateGroups = std::vector<std::vector<int>>;
using RowSupport = std::vector<std::vector<int>>;  // per input row, state indices

inline StateGroups full_group(int nd) {
  StateGroups g(1);
  for (int i = 0; i < nd; ++i) g[0].push_back(i);
  return g;
}

inline RowSupport full_support(int nu, int nd) {
  RowSupport s(nu);
  for (int i = 0; i < nu; ++i)
    for (int j = 0; j < nd; ++j) s[i].push_back(j);
  return s;
}

/// Connected components of the state graph whose edges join states
/// co-occurring in one gain row. Singleton components for untouched states.
inline StateGroups groups_from_support(const RowSupport& support, int nd) {
  std::vector<int> parent(nd);
  for (int i = 0; i < nd; ++i) parent[i] = i;
  std::function<int(int)> find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& sup : support)
    for (size_t k = 1; k < sup.size(); ++k) {
      const int ra = find(sup[0]), rb = find(sup[k]);
      if (ra != rb) parent[rb] = ra;
    }
  std::map<int, std::vector<int>> comp;
  for (int i = 0; i < nd; ++i) comp[find(i)].push_back(i);
  StateGroups g;
  for (auto& [root, members] : comp) g.push_back(members);
  return g;
}

struct SynthesisProgram {
  sdp::LmiBuilder builder;
  StateGroups groups;
  RowSupport support;
  std::vector<sdp::VarHandle> x1_blocks;
  std::vector<sdp::VarHandle> w_entries;  // ordered by (row, support entry)
  sdp::VarHandle Q2, R, r_scale, eps, t;
  bool reduced = false;
  int nd = 0, na = 0, nu = 0;

  MatrixXd x1_value(const VectorXd& x) const {
    MatrixXd X1 = MatrixXd::Zero(nd, nd);
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const MatrixXd Xg = sdp::LmiBuilder::value(x1_blocks[gi], x);
      const auto& g = groups[gi];
      for (size_t a = 0; a < g.size(); ++a)
        for (size_t b = 0; b < g.size(); ++b) X1(g[a], g[b]) = Xg(a, b);
    }
    return X1;
  }
  MatrixXd w_value(const VectorXd& x) const {
    MatrixXd W = MatrixXd::Zero(nu, nd);
    int k = 0;
    for (int i = 0; i < nu; ++i)
      for (int j : support[i]) W(i, j) = sdp::LmiBuilder::value(w_entries[k++], x)(0, 0);
    return W;
  }
};

/// Emits the synthesis program: min kappa*t subject to the block LMI
/// (shifted by alpha, floored by delta), X1 >= delta I, eps >= delta and
/// the spectral-norm epigraph. X1 is block-diagonal over `groups`, W is
/// supported on `support`. The reduced form drops Q2 and sets
/// R = -r_scale * A_a'.
inline SynthesisProgram build_synthesis(const NdaeModel& m, const BoundingMatrices& bounds,
                                        const SynthesisOptions& opt, const StateGroups& groups,
                                        const RowSupport& support, bool reduced) {
  SynthesisProgram P;
  P.groups = groups;
  P.support = support;
  P.reduced = reduced;
  P.nd = m.n_d();
  P.na = m.n_a();
  P.nu = m.n_u();
  sdp::LmiBuilder& B = P.builder;
  const int nd = P.nd, na = P.na, nu = P.nu;
  const MatrixXd Ad = m.A_d + opt.alpha * MatrixXd::Identity(nd, nd);
  const MatrixXd sqHd = psd_sqrt(bounds.Hbar_d);
  const MatrixXd sqHa = psd_sqrt(bounds.Hbar_a);
  const MatrixXd I_nd = MatrixXd::Identity(nd, nd);
  const MatrixXd I_na = MatrixXd::Identity(na, na);
  const MatrixXd I1 = MatrixXd::Identity(1, 1);

  for (const auto& g : groups) P.x1_blocks.push_back(B.add_sym(static_cast<int>(g.size())));
  if (!reduced) {
    P.Q2 = B.add_rect(na, nd);
    P.R = B.add_rect(na, na);
  } else {
    P.r_scale = B.add_scalar();
  }
  for (int i = 0; i < nu; ++i)
    for (size_t k = 0; k < support[i].size(); ++k) P.w_entries.push_back(B.add_scalar());
  P.eps = B.add_scalar();
  P.t = B.add_scalar();

  const int nt = 2 * nd + 2 * na;
  const int blk = B.add_psd_block(nt);  // -(LMI) - delta I >= 0
  const int r2 = nd, r3 = nd + na, r4 = 2 * nd + na;
  B.block_const(blk, 0, 0, -opt.delta * MatrixXd::Identity(nt, nt));

  // coeff * s * C at (r0, c0) for scalar variable s
  auto scalar_term = [&](int r0, int c0, const sdp::VarHandle& s, const MatrixXd& C,
                         double coeff) {
    for (int i = 0; i < C.rows(); ++i)
      for (int j = 0; j < C.cols(); ++j)
        if (C(i, j) != 0.0)
          B.block_term(blk, r0 + i, c0 + j, MatrixXd::Constant(1, 1, C(i, j)), s, I1, false,
                       coeff);
  };
  // L * X1 at (r0, c0), plus its transpose at the mirrored offset
  auto x1_terms = [&](const MatrixXd& L, int r0, int c0, double coeff) {
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      const int gs = static_cast<int>(g.size());
      MatrixXd Lsub(L.rows(), gs);
      for (int k = 0; k < gs; ++k) Lsub.col(k) = L.col(g[k]);
      MatrixXd sel = MatrixXd::Zero(gs, nd);
      for (int k = 0; k < gs; ++k) sel(k, g[k]) = 1.0;
      B.block_term(blk, r0, c0, coeff * Lsub, P.x1_blocks[gi], sel, false, 1.0);
      B.block_term(blk, c0, r0, sel.transpose(), P.x1_blocks[gi],
                   coeff * Lsub.transpose(), false, 1.0);
    }
  };

  // Psi row: Ad X1 + X1 Ad' + Bd W + W' Bd' + eps Gd Gd'   (negated)
  x1_terms(Ad, 0, 0, -1.0);
  {
    int wk = 0;
    for (int i = 0; i < nu; ++i)
      for (int j : support[i]) {
        const sdp::VarHandle& wv = P.w_entries[wk++];
        MatrixXd col = m.B_d.col(i);
        MatrixXd row = MatrixXd::Zero(1, nd);
        row(0, j) = 1.0;
        B.block_term(blk, 0, 0, -col, wv, row, false, 1.0);
        B.block_term(blk, 0, 0, -row.transpose(), wv, col.transpose(), false, 1.0);
      }
  }
  scalar_term(0, 0, P.eps, m.G_d * m.G_d.transpose(), -1.0);

  // Theta: R' Aa' + Aa R + eps Ga Ga'   (negated)
  if (!reduced) {
    B.block_term(blk, r2, r2, -m.A_a, P.R, I_na, false, 1.0);
    B.block_term(blk, r2, r2, -I_na, P.R, m.A_a.transpose(), true, 1.0);
  } else {
    scalar_term(r2, r2, P.r_scale, m.A_a * m.A_a.transpose(), 2.0);
  }
  scalar_term(r2, r2, P.eps, m.G_a * m.G_a.transpose(), -1.0);

  // (2,1) Aa Q2 and (4,1) sqHa Q2 (negated, with mirrored transposes)
  if (!reduced) {
    B.block_term(blk, r2, 0, -m.A_a, P.Q2, I_nd, false, 1.0);
    B.block_term(blk, 0, r2, -I_nd, P.Q2, m.A_a.transpose(), true, 1.0);
    B.block_term(blk, r4, 0, -sqHa, P.Q2, I_nd, false, 1.0);
    B.block_term(blk, 0, r4, -I_nd, P.Q2, sqHa.transpose(), true, 1.0);
  }
  // (3,1) sqHd X1
  x1_terms(sqHd, r3, 0, -1.0);
  // (4,2) sqHa R
  if (!reduced) {
    B.block_term(blk, r4, r2, -sqHa, P.R, I_na, false, 1.0);
    B.block_term(blk, r2, r4, -I_na, P.R, sqHa.transpose(), true, 1.0);
  } else {
    scalar_term(r4, r2, P.r_scale, sqHa * m.A_a.transpose(), 1.0);
    scalar_term(r2, r4, P.r_scale, m.A_a * sqHa.transpose(), 1.0);
  }
  // (3,3), (4,4): -(-eps I) = +eps I
  scalar_term(r3, r3, P.eps, MatrixXd::Identity(nd, nd), 1.0);
  scalar_term(r4, r4, P.eps, MatrixXd::Identity(na, na), 1.0);

  // X1 >= delta I per block
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const int gs = static_cast<int>(groups[gi].size());
    const int xb = B.add_psd_block(gs);
    B.block_const(xb, 0, 0, -opt.delta * MatrixXd::Identity(gs, gs));
    B.block_var(xb, 0, 0, P.x1_blocks[gi], false, 1.0);
  }
  // eps >= delta
  const int re = B.add_nonneg_row();
  B.lp_coeff(re, P.eps, 0, 0, 1.0);
  B.lp_const(re, -opt.delta);
  // epigraph [[tI, W],[W', tI]] >= 0
  const int eb = B.add_psd_block(nu + nd);
  for (int i = 0; i < nu + nd; ++i) B.block_term(eb, i, i, I1, P.t, I1, false, 1.0);
  {
    int wk = 0;
    for (int i = 0; i < nu; ++i)
      for (int j : support[i]) {
        const sdp::VarHandle& wv = P.w_entries[wk++];
        B.block_term(eb, i, nu + j, I1, wv, I1, false, 1.0);
        B.block_term(eb, nu + j, i, I1, wv, I1, false, 1.0);
      }
  }
  B.objective(P.t, 0, 0, opt.kappa);
  return P;
}

/// Margin-maximizing re-solve of the block LMI at fixed X1: the margin mu
/// with LMI <= -mu I is maximized over Q2, R (or r_scale), eps and -- when
/// `support` is non-null -- over W restricted to that support (otherwise W
/// stays fixed at W_in). The interior optimum makes this solve reliable even
/// when the norm-minimizing phase stops early; the returned tuple is
/// accepted only if the independently re-assembled matrix clears -delta/2.
inline bool refeasibility_solve(const NdaeModel& m, const BoundingMatrices& bounds,
                                const SynthesisOptions& opt, const MatrixXd& X1_fixed,
                                const MatrixXd& W_in, const RowSupport* support, bool reduced,
                                MatrixXd& W_out, MatrixXd& Q2_out, MatrixXd& R_out,
                                double& eps_out) {
  sdp::LmiBuilder B;
  const int nd = m.n_d(), na = m.n_a(), nu = m.n_u();
  const MatrixXd Ad = m.A_d + opt.alpha * MatrixXd::Identity(nd, nd);
  const MatrixXd sqHd = psd_sqrt(bounds.Hbar_d);
  const MatrixXd sqHa = psd_sqrt(bounds.Hbar_a);
  const MatrixXd I_nd = MatrixXd::Identity(nd, nd);
  const MatrixXd I_na = MatrixXd::Identity(na, na);
  const MatrixXd I1 = MatrixXd::Identity(1, 1);

  sdp::VarHandle Q2, R, r_scale;
  if (!reduced) {
    Q2 = B.add_rect(na, nd);
    R = B.add_rect(na, na);
  } else {
    r_scale = B.add_scalar();
  }
  std::vector<sdp::VarHandle> w_vars;
  if (support != nullptr)
    for (int i = 0; i < nu; ++i)
      for (size_t k = 0; k < (*support)[i].size(); ++k) w_vars.push_back(B.add_scalar());
  sdp::VarHandle eps = B.add_scalar();
  sdp::VarHandle mu = B.add_scalar();  // margin, maximized

  const int nt = 2 * nd + 2 * na;
  const int blk = B.add_psd_block(nt);
  const int r2 = nd, r3 = nd + na, r4 = 2 * nd + na;
  auto scalar_term = [&](int r0, int c0, const sdp::VarHandle& s, const MatrixXd& C,
                         double coeff) {
    for (int i = 0; i < C.rows(); ++i)
      for (int j = 0; j < C.cols(); ++j)
        if (C(i, j) != 0.0)
          B.block_term(blk, r0 + i, c0 + j, MatrixXd::Constant(1, 1, C(i, j)), s, I1, false,
                       coeff);
  };
  MatrixXd C0 = MatrixXd::Zero(nt, nt);
  MatrixXd psi_fixed = Ad * X1_fixed + X1_fixed * Ad.transpose();
  if (support == nullptr)
    psi_fixed += m.B_d * W_in + W_in.transpose() * m.B_d.transpose();
  C0.block(0, 0, nd, nd) = -psi_fixed;
  C0.block(r3, 0, nd, nd) = -sqHd * X1_fixed;
  C0.block(0, r3, nd, nd) = -X1_fixed * sqHd.transpose();
  B.block_const(blk, 0, 0, C0);
  if (support != nullptr) {
    int wk = 0;
    for (int i = 0; i < nu; ++i)
      for (int j : (*support)[i]) {
        const sdp::VarHandle& wv = w_vars[wk++];
        MatrixXd col = m.B_d.col(i);
        MatrixXd row = MatrixXd::Zero(1, nd);
        row(0, j) = 1.0;
        B.block_term(blk, 0, 0, -col, wv, row, false, 1.0);
        B.block_term(blk, 0, 0, -row.transpose(), wv, col.transpose(), false, 1.0);
      }
  }
  scalar_term(0, 0, mu, MatrixXd::Identity(nt, nt), -1.0);  // LMI <= -mu I
  scalar_term(0, 0, eps, m.G_d * m.G_d.transpose(), -1.0);
  scalar_term(r2, r2, eps, m.G_a * m.G_a.transpose(), -1.0);
  scalar_term(r3, r3, eps, MatrixXd::Identity(nd, nd), 1.0);
  scalar_term(r4, r4, eps, MatrixXd::Identity(na, na), 1.0);
  if (!reduced) {
    B.block_term(blk, r2, r2, -m.A_a, R, I_na, false, 1.0);
    B.block_term(blk, r2, r2, -I_na, R, m.A_a.transpose(), true, 1.0);
    B.block_term(blk, r2, 0, -m.A_a, Q2, I_nd, false, 1.0);
    B.block_term(blk, 0, r2, -I_nd, Q2, m.A_a.transpose(), true, 1.0);
    B.block_term(blk, r4, 0, -sqHa, Q2, I_nd, false, 1.0);
    B.block_term(blk, 0, r4, -I_nd, Q2, sqHa.transpose(), true, 1.0);
    B.block_term(blk, r4, r2, -sqHa, R, I_na, false, 1.0);
    B.block_term(blk, r2, r4, -I_na, R, sqHa.transpose(), true, 1.0);
  } else {
    scalar_term(r2, r2, r_scale, m.A_a * m.A_a.transpose(), 2.0);
    scalar_term(r4, r2, r_scale, sqHa * m.A_a.transpose(), 1.0);
    scalar_term(r2, r4, r_scale, m.A_a * sqHa.transpose(), 1.0);
  }
  const int re = B.add_nonneg_row();
  B.lp_coeff(re, eps, 0, 0, 1.0);
  B.lp_const(re, -opt.delta);
  const int rm = B.add_nonneg_row();
  B.lp_coeff(rm, mu, 0, 0, 1.0);
  B.lp_const(rm, -opt.delta);
  B.objective(mu, 0, 0, -1.0);  // maximize the margin

  sdp::Settings st = opt.solver;
  const sdp::Solution sol = B.build().solve(st);
  if (sol.x.size() == 0) return false;
  if (support != nullptr) {
    W_out = MatrixXd::Zero(nu, nd);
    int wk = 0;
    for (int i = 0; i < nu; ++i)
      for (int j : (*support)[i]) W_out(i, j) = sdp::LmiBuilder::value(w_vars[wk++], sol.x)(0, 0);
  } else {
    W_out = W_in;
  }
  if (!reduced) {
    Q2_out = sdp::LmiBuilder::value(Q2, sol.x);
    R_out = sdp::LmiBuilder::value(R, sol.x);
  } else {
    Q2_out = MatrixXd::Zero(na, nd);
    R_out = -sdp::LmiBuilder::value(r_scale, sol.x)(0, 0) * m.A_a.transpose();
  }
  eps_out = sdp::LmiBuilder::value(eps, sol.x)(0, 0);
  // accept only if the re-assembled matrix is actually negative enough
  const MatrixXd Mchk = assemble_synthesis_lmi(m, bounds, opt.alpha, X1_fixed, Q2_out, R_out,
                                               W_out, eps_out);
  return lambda_max_sym(Mchk) <= -0.5 * opt.delta;
}

}  // namespace detail

/// Reduced-model spectral abscissa of A_red + B_red K at the scheduled
/// operating point (linearization of the closed loop on the manifold).
inline double reduced_abscissa(const NdaeModel& m, const OperatingPoint& op,
                               const MatrixXd& K) {
  const Jacobians J = eval_jacobians(m, op.x_d_k, op.x_a_k, op.u_ref_k);
  const MatrixXd A_red =
      J.f_xd - J.f_xa * J.g_xa.partialPivLu().solve(J.g_xd);
  const MatrixXd Acl = A_red + m.B_d * K;
  return Eigen::EigenSolver<MatrixXd>(Acl).eigenvalues().real().maxCoeff();
}

/// Solves problem P for the feedback gain: minimizes kappa*||W||_2 over the
/// alpha-shifted block LMI with delta floors; optionally re-solves on the
/// structure detected in the first pass (which makes the returned gain
/// exactly sparse) and scales the gain toward a faster reduced-model decay,
/// re-establishing LMI feasibility at the scaled W before returning.
inline SynthesisResult synthesize_gain(const NdaeModel& m, const BoundingMatrices& bounds,
                                       const SynthesisOptions& opt = {},
                                       const OperatingPoint* op_for_scaling = nullptr) {
  const int nd = m.n_d(), na = m.n_a(), nu = m.n_u();
  SynthesisResult res;
  const int full_vars = nd * (nd + 1) / 2 + na * nd + na * na + nu * nd + 2;
  const bool reduced = full_vars > opt.reduced_threshold;
  res.reduced = reduced;

  detail::SynthesisProgram prog = detail::build_synthesis(
      m, bounds, opt, detail::full_group(nd), detail::full_support(nu, nd), reduced);
  sdp::Solution sol = prog.builder.build().solve(opt.solver);
  if (sol.x.size() == 0) {
    res.status = sdp::status_name(sol.status);
    res.feasible = false;
    return res;
  }
  MatrixXd X1 = prog.x1_value(sol.x);
  MatrixXd W = prog.w_value(sol.x);
  MatrixXd Q2 = reduced ? MatrixXd::Zero(na, nd) : sdp::LmiBuilder::value(prog.Q2, sol.x);
  MatrixXd R = reduced
                   ? MatrixXd(-sdp::LmiBuilder::value(prog.r_scale, sol.x)(0, 0) *
                              m.A_a.transpose())
                   : sdp::LmiBuilder::value(prog.R, sol.x);
  double eps_bar = sdp::LmiBuilder::value(prog.eps, sol.x)(0, 0);
  res.status = sdp::status_name(sol.status);

  // ---- structured polish: detect the gain support and re-solve ---------
  detail::RowSupport support = detail::full_support(nu, nd);
  if (opt.structured_polish && !reduced) {
    const MatrixXd K0 = W * X1.partialPivLu().solve(MatrixXd::Identity(nd, nd));
    const double kmax = K0.cwiseAbs().maxCoeff();
    detail::RowSupport detected(nu);
    for (int i = 0; i < nu; ++i)
      for (int j = 0; j < nd; ++j)
        if (std::abs(K0(i, j)) >= 1e-3 * kmax) detected[i].push_back(j);
    bool nontrivial = false;
    for (const auto& s : detected) nontrivial |= s.size() < static_cast<size_t>(nd);
    if (nontrivial) {
      support = detected;
      const detail::StateGroups groups = detail::groups_from_support(support, nd);
      detail::SynthesisProgram polish =
          detail::build_synthesis(m, bounds, opt, groups, support, false);
      const sdp::Solution psol = polish.builder.build().solve(opt.solver);
      if (psol.x.size() > 0) {
        X1 = polish.x1_value(psol.x);
        W = polish.w_value(psol.x);
        res.status = std::string(sdp::status_name(psol.status)) + "+polish";
      }
    }
  }

  // X1 must be safely positive definite before it is frozen: shift it up to
  // the floor if the (possibly early-stopped) solve left it short. The gain
  // keeps the detected structure because the shift respects the blocks.
  {
    const double lmin =
        Eigen::SelfAdjointEigenSolver<MatrixXd>(X1).eigenvalues().minCoeff();
    if (lmin < opt.delta)
      X1 += (opt.delta - lmin) * MatrixXd::Identity(nd, nd);
  }

  // ---- margin-maximizing re-centering at fixed X1, W free on support ---
  {
    MatrixXd Ws, Q2s, Rs;
    double eps_s = 0.0;
    if (detail::refeasibility_solve(m, bounds, opt, X1, W, &support, reduced, Ws, Q2s, Rs,
                                    eps_s)) {
      W = Ws;
      Q2 = Q2s;
      R = Rs;
      eps_bar = eps_s;
      res.status += "+margin";
    }
  }
  MatrixXd K = W * X1.partialPivLu().solve(MatrixXd::Identity(nd, nd));

  // ---- gain scaling toward the best reduced-model decay ----------------
  if (opt.gain_scaling && op_for_scaling != nullptr) {
    double best_c = 1.0;
    double best_a = reduced_abscissa(m, *op_for_scaling, K);
    for (double c = 0.25; c <= opt.scale_max + 1e-9; c += 0.25) {
      const double a = reduced_abscissa(m, *op_for_scaling, c * K);
      if (a < best_a) {
        best_a = a;
        best_c = c;
      }
    }
    if (std::abs(best_c - 1.0) > 1e-9) {
      MatrixXd Ws, Q2s, Rs;
      double eps_s = 0.0;
      if (detail::refeasibility_solve(m, bounds, opt, X1, best_c * W, nullptr, reduced, Ws,
                                      Q2s, Rs, eps_s)) {
        W = Ws;
        K *= best_c;
        Q2 = Q2s;
        R = Rs;
        eps_bar = eps_s;
        res.gain_scale = best_c;
      }
    }
  }

  res.X1 = X1;
  res.X2 = Q2;  // Q2 = X2 E_d' + Y with E_d = I; Y reported as zero
  res.Y = MatrixXd::Zero(na, nd);
  res.R = R;
  res.W = W;
  res.eps_bar = eps_bar;
  res.K_d = K;
  res.objective = opt.kappa * detail::spectral_norm(W);
  const MatrixXd Mchk = assemble_synthesis_lmi(m, bounds, opt.alpha, X1, Q2, R, W, eps_bar);
  res.lmi_lambda_max = detail::lambda_max_sym(Mchk);
  res.feasible = res.lmi_lambda_max <= -0.5 * opt.delta &&
                 Eigen::SelfAdjointEigenSolver<MatrixXd>(X1).eigenvalues().minCoeff() > 0.0;
  return res;
}

/// Dense re-assembly of the fixed-gain certificate matrix Omega.
inline MatrixXd assemble_certificate_lmi(const NdaeModel& m, const MatrixXd& K_d,
                                         const BoundingMatrices& bounds, const MatrixXd& P1,
                                         const MatrixXd& P2, const MatrixXd& P3, double eps) {
  const int nd = m.n_d(), na = m.n_a(), nfd = m.idx.n_fd, nfa = m.idx.n_fa;
  const MatrixXd Acl = m.A_d + m.B_d * K_d;
  MatrixXd Om = MatrixXd::Zero(nd + na + nfd + nfa, nd + na + nfd + nfa);
  const int r2 = nd, r3 = nd + na, r4 = nd + na + nfd;
  Om.block(0, 0, nd, nd) =
      Acl.transpose() * P1 + P1.transpose() * Acl + eps * bounds.Hbar_d;
  Om.block(r2, 0, na, nd) = m.A_a.transpose() * P2;
  Om.block(r2, r2, na, na) =
      m.A_a.transpose() * P3 + P3.transpose() * m.A_a + eps * bounds.Hbar_a;
  Om.block(r3, 0, nfd, nd) = m.G_d.transpose() * P1;
  Om.block(r4, 0, nfa, nd) = m.G_a.transpose() * P2;
  Om.block(r4, r2, nfa, na) = m.G_a.transpose() * P3;
  Om.block(r3, r3, nfd, nfd) = -eps * MatrixXd::Identity(nfd, nfd);
  Om.block(r4, r4, nfa, nfa) = -eps * MatrixXd::Identity(nfa, nfa);
  Om.block(0, r2, nd, na) = Om.block(r2, 0, na, nd).transpose();
  Om.block(0, r3, nd, nfd) = Om.block(r3, 0, nfd, nd).transpose();
  Om.block(0, r4, nd, nfa) = Om.block(r4, 0, nfa, nd).transpose();
  Om.block(r2, r4, na, nfa) = Om.block(r4, r2, nfa, na).transpose();
  return Om;
}

struct CertificateOptions {
  double margin = 1e-6;
  bool reduced = false;  // P2 = 0, P3 = -p3_scale * A_a^{-T}
  sdp::Settings solver;
  CertificateOptions() {
    solver.max_iters = 120000;
    solver.eps = 1e-9;
  }
};

/// Fixed-gain closed-loop certificate: find (P1, P2, P3, eps) making Omega
/// negative definite with E_d' P1 = P1 symmetric positive definite.
inline CertificateResult verify_certificate(const NdaeModel& m, const MatrixXd& K_d,
                                            const BoundingMatrices& bounds,
                                            const CertificateOptions& copt = {}) {
  const int nd = m.n_d(), na = m.n_a(), nfd = m.idx.n_fd, nfa = m.idx.n_fa;
  const MatrixXd Acl = m.A_d + m.B_d * K_d;
  const MatrixXd I1 = MatrixXd::Identity(1, 1);
  sdp::LmiBuilder B;
  sdp::VarHandle P1 = B.add_sym(nd);
  sdp::VarHandle P2, P3, p3s;
  if (!copt.reduced) {
    P2 = B.add_rect(na, nd);
    P3 = B.add_rect(na, na);
  } else {
    p3s = B.add_scalar();
  }
  sdp::VarHandle eps = B.add_scalar();

  const int nt = nd + na + nfd + nfa;
  const int blk = B.add_psd_block(nt);  // -(Omega) - margin I >= 0
  const int r2 = nd, r3 = nd + na, r4 = nd + na + nfd;
  auto scalar_term = [&](int r0, int c0, const sdp::VarHandle& s, const MatrixXd& C,
                         double coeff) {
    for (int i = 0; i < C.rows(); ++i)
      for (int j = 0; j < C.cols(); ++j)
        if (C(i, j) != 0.0)
          B.block_term(blk, r0 + i, c0 + j, MatrixXd::Constant(1, 1, C(i, j)), s, I1, false,
                       coeff);
  };
  B.block_const(blk, 0, 0, -copt.margin * MatrixXd::Identity(nt, nt));
  // (1,1): Acl' P1 + P1 Acl + eps Hbar_d
  B.block_term(blk, 0, 0, -Acl.transpose(), P1, MatrixXd::Identity(nd, nd), false, 1.0);
  B.block_term(blk, 0, 0, -MatrixXd::Identity(nd, nd), P1, Acl, false, 1.0);
  scalar_term(0, 0, eps, bounds.Hbar_d, -1.0);
  // (3,1): Gd' P1
  B.block_term(blk, r3, 0, -m.G_d.transpose(), P1, MatrixXd::Identity(nd, nd), false, 1.0);
  B.block_term(blk, 0, r3, -MatrixXd::Identity(nd, nd), P1, m.G_d, false, 1.0);
  if (!copt.reduced) {
    // (2,1): Aa' P2  /  (2,2): Aa' P3 + P3' Aa + eps Hbar_a
    B.block_term(blk, r2, 0, -m.A_a.transpose(), P2, MatrixXd::Identity(nd, nd), false, 1.0);
    B.block_term(blk, 0, r2, -MatrixXd::Identity(nd, nd), P2, m.A_a, true, 1.0);
    B.block_term(blk, r2, r2, -m.A_a.transpose(), P3, MatrixXd::Identity(na, na), false, 1.0);
    B.block_term(blk, r2, r2, -MatrixXd::Identity(na, na), P3, m.A_a, true, 1.0);
    // (4,1): Ga' P2 ; (4,2): Ga' P3
    B.block_term(blk, r4, 0, -m.G_a.transpose(), P2, MatrixXd::Identity(nd, nd), false, 1.0);
    B.block_term(blk, 0, r4, -MatrixXd::Identity(nd, nd), P2, m.G_a, true, 1.0);
    B.block_term(blk, r4, r2, -m.G_a.transpose(), P3, MatrixXd::Identity(na, na), false, 1.0);
    B.block_term(blk, r2, r4, -MatrixXd::Identity(na, na), P3, m.G_a, true, 1.0);
  } else {
    // P3 = -p3s * Aa^{-T}: Aa' P3 = -p3s I
    const MatrixXd AaInvT = m.A_a.transpose().partialPivLu().solve(
        MatrixXd::Identity(na, na));
    scalar_term(r2, r2, p3s, MatrixXd::Identity(na, na), 2.0);
    const MatrixXd GtP3dir = m.G_a.transpose() * (-AaInvT);
    scalar_term(r4, r2, p3s, GtP3dir, -1.0);
    scalar_term(r2, r4, p3s, GtP3dir.transpose(), -1.0);
  }
  scalar_term(r2, r2, eps, bounds.Hbar_a, -1.0);
  scalar_term(r3, r3, eps, MatrixXd::Identity(nfd, nfd), 1.0);
  scalar_term(r4, r4, eps, MatrixXd::Identity(nfa, nfa), 1.0);

  // P1 >= margin I
  const int pb = B.add_psd_block(nd);
  B.block_const(pb, 0, 0, -copt.margin * MatrixXd::Identity(nd, nd));
  B.block_var(pb, 0, 0, P1, false, 1.0);
  // eps >= margin
  const int re = B.add_nonneg_row();
  B.lp_coeff(re, eps, 0, 0, 1.0);
  B.lp_const(re, -copt.margin);
  if (copt.reduced) {
    const int rp = B.add_nonneg_row();
    B.lp_coeff(rp, p3s, 0, 0, 1.0);
    B.lp_const(rp, -copt.margin);
  }

  const sdp::Solution sol = B.build().solve(copt.solver);
  CertificateResult out;
  out.status = sdp::status_name(sol.status);
  if (sol.x.size() == 0) {
    out.feasible = false;
    return out;
  }
  out.P1 = sdp::LmiBuilder::value(P1, sol.x);
  if (!copt.reduced) {
    out.P2 = sdp::LmiBuilder::value(P2, sol.x);
    out.P3 = sdp::LmiBuilder::value(P3, sol.x);
  } else {
    out.P2 = MatrixXd::Zero(na, nd);
    out.P3 = -sdp::LmiBuilder::value(p3s, sol.x)(0, 0) *
             m.A_a.transpose().partialPivLu().solve(MatrixXd::Identity(na, na));
  }
  out.eps = sdp::LmiBuilder::value(eps, sol.x)(0, 0);
  const MatrixXd Om = assemble_certificate_lmi(m, K_d, bounds, out.P1, out.P2, out.P3,
                                               out.eps);
  out.min_eig_margin = -detail::lambda_max_sym(Om);
  out.feasible = out.min_eig_margin > 0.0 &&
                 Eigen::SelfAdjointEigenSolver<MatrixXd>(out.P1).eigenvalues().minCoeff() > 0.0;
  return out;
}

struct QuadraticBoundReport {
  double violation_fraction = 0.0;
  double worst_ratio = 0.0;  // max over samples of ||df|| / ||H dx||
  int samples = 0;
};

/// Monte-Carlo probe of the deviation-nonlinearity quadratic bounds around
/// an operating point: reports how often ||df||^2 <= ||Hd dx_d||^2 + ||Ha dx_a||^2
/// fails over a box, and the worst ratio seen. Nothing is asserted.
inline QuadraticBoundReport check_quadratic_bounds(const NdaeModel& m,
                                                   const BoundingMatrices& bounds,
                                                   double box_dyn, double box_alg,
                                                   int samples, const OperatingPoint& op,
                                                   unsigned seed = 12345) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const VectorXd fd0 = m.f_d(op.x_d_k, op.x_a_k);
  const VectorXd fa0 = m.f_a(op.x_d_k, op.x_a_k);
  QuadraticBoundReport rep;
  rep.samples = samples;
  int bad = 0;
  for (int s = 0; s < samples; ++s) {
    VectorXd dxd(m.n_d()), dxa(m.n_a());
    for (int i = 0; i < m.n_d(); ++i) dxd(i) = box_dyn * u(rng);
    for (int i = 0; i < m.n_a(); ++i) dxa(i) = box_alg * u(rng);
    const VectorXd xd = op.x_d_k + dxd;
    const VectorXd xa = op.x_a_k + dxa;
    const double dfd2 = (m.f_d(xd, xa) - fd0).squaredNorm();
    const double dfa2 = (m.f_a(xd, xa) - fa0).squaredNorm();
    const double rhs_d = bounds.hd_sq * dxd.squaredNorm() + bounds.hd_sq * dxa.squaredNorm();
    const double rhs_a = bounds.ha_sq * dxd.squaredNorm() + bounds.ha_sq * dxa.squaredNorm();
    const bool ok_d = dfd2 <= rhs_d;
    const bool ok_a = dfa2 <= rhs_a;
    if (!(ok_d && ok_a)) ++bad;
    if (rhs_d > 0) rep.worst_ratio = std::max(rep.worst_ratio, std::sqrt(dfd2 / rhs_d));
    if (rhs_a > 0) rep.worst_ratio = std::max(rep.worst_ratio, std::sqrt(dfa2 / rhs_a));
  }
  rep.violation_fraction = static_cast<double>(bad) / std::max(1, samples);
  return rep;
}

/// lambda_max(M' (a M M' + b I)^{-1} M - a I); nonpositive for a, b > 0.
inline double lemma1_gap(const MatrixXd& M, double a, double b) {
  const int r = static_cast<int>(M.rows());
  const MatrixXd inner = a * M * M.transpose() + b * MatrixXd::Identity(r, r);
  const MatrixXd expr = M.transpose() * inner.llt().solve(M) -
                        a * MatrixXd::Identity(M.cols(), M.cols());
  return detail::lambda_max_sym(expr);
}

}  // namespace gridctl
