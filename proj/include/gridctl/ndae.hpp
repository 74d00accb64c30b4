#pragma once

// Semi-explicit NDAE assembly, residual and Jacobian evaluation.
//
// Dynamic block (per machine): x_d = [delta; omega; E'; T_M]
//   delta'       = omega - omega0
//   M omega'     = T_M - P_G - D (omega - omega0)
//   Td0' E''     = -(x_d/x_d') E' + ((x_d - x_d')/x_d') v cos(delta - theta) + E_fd
//   T_CH T_M'    = -T_M - (1/R_D)(omega - omega0) + T_r
// Algebraic block: x_a = [P_G; Q_G; v; theta] with the machine power
// equations and the network power balance.
//
// The constant split r_a = A_a x_a + G_a f_a + B_a q is not unique. Here
// A_a carries the exact algebraic Jacobian at the neutral reference
// (v = 1, theta = 0, delta = 0, E' = 1), obtained by moving the reference
// linearization of the raw channel stack out of the nonlinearity, and the
// remaining nonlinear part enters through G_a scaled by a configurable
// channel weight. The residual itself is independent of the split; the
// split shapes only the synthesis data.

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "gridctl/netcase.hpp"
#include "gridctl/powerflow.hpp"

namespace gridctl {

struct StateIndexing {
  int n_bus = 0, n_gen = 0;
  int n_d = 0, n_a = 0, n_u = 0, n_q = 0;
  int n_fd = 0, n_fa = 0;
  std::vector<int> gen_bus;   // 0-based bus index per machine
  std::vector<int> ren_bus;   // 0-based, sorted
  std::vector<int> load_bus;  // 0-based, sorted

  // x_d block offsets
  int delta0() const { return 0; }
  int omega0_() const { return n_gen; }
  int eprime0() const { return 2 * n_gen; }
  int tm0() const { return 3 * n_gen; }
  // x_a block offsets
  int pg0() const { return 0; }
  int qg0() const { return n_gen; }
  int v0() const { return 2 * n_gen; }
  int theta0() const { return 2 * n_gen + n_bus; }
  // u block offsets
  int efd0() const { return 0; }
  int tr0() const { return n_gen; }
};

struct Residual {
  VectorXd r_d;  // pu/s per row
  VectorXd r_a;  // pu
};

/// Jacobians of the Eq.-(4) right-hand sides: f = dynamic rhs, g = algebraic residual.
struct Jacobians {
  MatrixXd f_xd, f_xa;  // d(rhs_d)/dx_d, d(rhs_d)/dx_a
  MatrixXd g_xd, g_xa;  // d(r_a)/dx_d,   d(r_a)/dx_a
};

struct NdaeOptions {
  // Weight of the nonlinear remainder channels in the synthesis split G_a.
  double channel_scale = 0.02;
};

class NdaeModel {
 public:
  NetworkCase net;
  AdmittanceMatrix ybus;
  StateIndexing idx;
  double omega0 = kOmega0;
  double channel_scale = 0.02;

  // machine parameter vectors (length G)
  VectorXd M, D, xd, xq, xdp, td0p, tch, rd;

  // Eq.-(4) constant matrices
  MatrixXd A_d, G_d, B_d;
  VectorXd h;
  MatrixXd A_a, G_a, B_a;

  // split bookkeeping: G_a = G_a_raw * channel_scale,
  // A_a = A_struct + G_a_raw * C_ref,  f_a = (f_raw - C_ref x_a)/channel_scale
  MatrixXd G_a_raw;
  MatrixXd C_ref;

  int n_d() const { return idx.n_d; }
  int n_a() const { return idx.n_a; }
  int n_u() const { return idx.n_u; }
  int n_q() const { return idx.n_q; }

  VectorXd f_d(const VectorXd& x_d, const VectorXd& x_a) const;
  VectorXd f_a(const VectorXd& x_d, const VectorXd& x_a) const;
  VectorXd dynamic_rhs(const VectorXd& x_d, const VectorXd& x_a, const VectorXd& u) const;
  VectorXd algebraic_residual(const VectorXd& x_d, const VectorXd& x_a,
                              const VectorXd& q) const;
  VectorXd scheduled_q() const;

 private:
  VectorXd f_a_raw(const VectorXd& x_d, const VectorXd& x_a) const;
  void raw_channel_jacobians(const VectorXd& x_d, const VectorXd& x_a, MatrixXd& j_xd,
                             MatrixXd& j_xa) const;
  friend NdaeModel assemble_model(const NetworkCase&, const AdmittanceMatrix&,
                                  const NdaeOptions&);
  friend Jacobians eval_jacobians(const NdaeModel&, const VectorXd&, const VectorXd&,
                                  const VectorXd&);
};

namespace detail {

inline void check_size(const VectorXd& v, int n, const char* what) {
  if (v.size() != n)
    throw std::invalid_argument(std::string(what) + ": expected length " + std::to_string(n) +
                                ", got " + std::to_string(v.size()));
}

inline void check_finite(const VectorXd& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace detail

inline VectorXd NdaeModel::f_d(const VectorXd& x_d, const VectorXd& x_a) const {
  const int G = idx.n_gen;
  VectorXd out(idx.n_fd);
  out.head(G) = x_a.segment(idx.pg0(), G);
  for (int k = 0; k < G; ++k) {
    const int b = idx.gen_bus[k];
    const double a = x_d(idx.delta0() + k) - x_a(idx.theta0() + b);
    out(G + k) = x_a(idx.v0() + b) * std::cos(a);
  }
  return out;
}

inline VectorXd NdaeModel::f_a_raw(const VectorXd& x_d, const VectorXd& x_a) const {
  const int G = idx.n_gen, N = idx.n_bus;
  const VectorXd v = x_a.segment(idx.v0(), N);
  const VectorXd th = x_a.segment(idx.theta0(), N);
  VectorXd p(N), q(N);
  detail::bus_injections(ybus, v, th, p, q);
  VectorXd out(idx.n_fa);
  for (int k = 0; k < G; ++k) {
    const int b = idx.gen_bus[k];
    const double a = x_d(idx.delta0() + k) - th(b);
    const double ep = x_d(idx.eprime0() + k);
    const double vb = v(b);
    out(k) = ep * vb * std::sin(a);
    out(G + k) = vb * vb * std::sin(2 * a);
    out(2 * G + k) = ep * vb * std::cos(a);
    out(3 * G + k) = vb * vb;
    out(4 * G + k) = vb * vb * std::cos(2 * a);
  }
  out.segment(5 * G, N) = p;
  out.segment(5 * G + N, N) = q;
  return out;
}

inline VectorXd NdaeModel::f_a(const VectorXd& x_d, const VectorXd& x_a) const {
  return (f_a_raw(x_d, x_a) - C_ref * x_a) / channel_scale;
}

inline VectorXd NdaeModel::dynamic_rhs(const VectorXd& x_d, const VectorXd& x_a,
                                       const VectorXd& u) const {
  return A_d * x_d + G_d * f_d(x_d, x_a) + B_d * u + h * omega0;
}

inline VectorXd NdaeModel::algebraic_residual(const VectorXd& x_d, const VectorXd& x_a,
                                              const VectorXd& q) const {
  return A_a * x_a + G_a * f_a(x_d, x_a) + B_a * q;
}

/// q = [P_R; Q_R; P_L; Q_L] as signed injections at the scheduled level:
/// renewables inject, loads consume.
inline VectorXd NdaeModel::scheduled_q() const {
  VectorXd q(idx.n_q);
  const int R = static_cast<int>(idx.ren_bus.size());
  const int L = static_cast<int>(idx.load_bus.size());
  for (int k = 0; k < R; ++k) {
    q(k) = net.buses[idx.ren_bus[k]].p_ren;
    q(R + k) = net.buses[idx.ren_bus[k]].q_ren;
  }
  for (int k = 0; k < L; ++k) {
    q(2 * R + k) = -net.buses[idx.load_bus[k]].p_load;
    q(2 * R + L + k) = -net.buses[idx.load_bus[k]].q_load;
  }
  return q;
}

inline void NdaeModel::raw_channel_jacobians(const VectorXd& x_d, const VectorXd& x_a,
                                             MatrixXd& j_xd, MatrixXd& j_xa) const {
  const int G = idx.n_gen, N = idx.n_bus;
  j_xd = MatrixXd::Zero(idx.n_fa, idx.n_d);
  j_xa = MatrixXd::Zero(idx.n_fa, idx.n_a);
  const VectorXd v = x_a.segment(idx.v0(), N);
  const VectorXd th = x_a.segment(idx.theta0(), N);
  for (int k = 0; k < G; ++k) {
    const int b = idx.gen_bus[k];
    const double a = x_d(idx.delta0() + k) - th(b);
    const double ep = x_d(idx.eprime0() + k);
    const double vb = v(b);
    const double sa = std::sin(a), ca = std::cos(a);
    const double s2 = std::sin(2 * a), c2 = std::cos(2 * a);
    const int iv = idx.v0() + b, ith = idx.theta0() + b;
    // E' v sin(a)
    j_xd(k, idx.delta0() + k) = ep * vb * ca;
    j_xd(k, idx.eprime0() + k) = vb * sa;
    j_xa(k, iv) = ep * sa;
    j_xa(k, ith) = -ep * vb * ca;
    // v^2 sin(2a)
    j_xd(G + k, idx.delta0() + k) = 2 * vb * vb * c2;
    j_xa(G + k, iv) = 2 * vb * s2;
    j_xa(G + k, ith) = -2 * vb * vb * c2;
    // E' v cos(a)
    j_xd(2 * G + k, idx.delta0() + k) = -ep * vb * sa;
    j_xd(2 * G + k, idx.eprime0() + k) = vb * ca;
    j_xa(2 * G + k, iv) = ep * ca;
    j_xa(2 * G + k, ith) = ep * vb * sa;
    // v^2
    j_xa(3 * G + k, iv) = 2 * vb;
    // v^2 cos(2a)
    j_xd(4 * G + k, idx.delta0() + k) = -2 * vb * vb * s2;
    j_xa(4 * G + k, iv) = 2 * vb * c2;
    j_xa(4 * G + k, ith) = 2 * vb * vb * s2;
  }
  const detail::PfJacobian pj = detail::pf_jacobian(ybus, v, th);
  j_xa.block(5 * G, idx.v0(), N, N) = pj.dp_dv;
  j_xa.block(5 * G, idx.theta0(), N, N) = pj.dp_dth;
  j_xa.block(5 * G + N, idx.v0(), N, N) = pj.dq_dv;
  j_xa.block(5 * G + N, idx.theta0(), N, N) = pj.dq_dth;
}

inline NdaeModel assemble_model(const NetworkCase& net, const AdmittanceMatrix& ybus,
                                const NdaeOptions& opts = {}) {
  NdaeModel m;
  m.net = net;
  m.ybus = ybus;
  m.omega0 = net.omega0;
  m.channel_scale = opts.channel_scale;
  if (!(opts.channel_scale > 0.0))
    throw std::invalid_argument("channel_scale must be positive");

  StateIndexing& ix = m.idx;
  ix.n_bus = net.n_bus();
  ix.n_gen = net.n_gen();
  for (const GeneratorParams& g : net.generators) ix.gen_bus.push_back(g.bus - 1);
  ix.ren_bus = net.renewable_buses();
  ix.load_bus = net.load_buses();
  const int G = ix.n_gen, N = ix.n_bus;
  ix.n_d = 4 * G;
  ix.n_a = 2 * G + 2 * N;
  ix.n_u = 2 * G;
  ix.n_fd = 2 * G;
  ix.n_fa = 5 * G + 2 * N;
  ix.n_q = 2 * static_cast<int>(ix.ren_bus.size()) + 2 * static_cast<int>(ix.load_bus.size());

  auto vec = [&](auto getter) {
    VectorXd v(G);
    for (int k = 0; k < G; ++k) v(k) = getter(net.generators[k]);
    return v;
  };
  m.M = vec([](const GeneratorParams& g) { return g.inertia_m; });
  m.D = vec([](const GeneratorParams& g) { return g.damping_d; });
  m.xd = vec([](const GeneratorParams& g) { return g.x_d; });
  m.xq = vec([](const GeneratorParams& g) { return g.x_q; });
  m.xdp = vec([](const GeneratorParams& g) { return g.x_d_prime; });
  m.td0p = vec([](const GeneratorParams& g) { return g.t_d0_prime; });
  m.tch = vec([](const GeneratorParams& g) { return g.t_ch; });
  m.rd = vec([](const GeneratorParams& g) { return g.r_d; });

  // dynamic block
  m.A_d = MatrixXd::Zero(ix.n_d, ix.n_d);
  m.A_d.block(0, G, G, G).setIdentity();
  m.A_d.block(G, G, G, G) = (-m.D.array() / m.M.array()).matrix().asDiagonal();
  m.A_d.block(G, 3 * G, G, G) = m.M.cwiseInverse().asDiagonal();
  m.A_d.block(2 * G, 2 * G, G, G) =
      (-m.xd.array() / (m.xdp.array() * m.td0p.array())).matrix().asDiagonal();
  m.A_d.block(3 * G, G, G, G) =
      (-1.0 / (m.rd.array() * m.tch.array())).matrix().asDiagonal();
  m.A_d.block(3 * G, 3 * G, G, G) = (-m.tch.cwiseInverse()).asDiagonal();

  m.G_d = MatrixXd::Zero(ix.n_d, ix.n_fd);
  m.G_d.block(G, 0, G, G) = (-m.M.cwiseInverse()).asDiagonal();
  m.G_d.block(2 * G, G, G, G) =
      ((m.xd - m.xdp).array() / (m.xdp.array() * m.td0p.array())).matrix().asDiagonal();

  m.B_d = MatrixXd::Zero(ix.n_d, ix.n_u);
  m.B_d.block(2 * G, 0, G, G) = m.td0p.cwiseInverse().asDiagonal();
  m.B_d.block(3 * G, G, G, G) = m.tch.cwiseInverse().asDiagonal();

  m.h = VectorXd(ix.n_d);
  m.h.segment(0, G).setConstant(-1.0);
  m.h.segment(G, G) = m.D.cwiseQuotient(m.M);
  m.h.segment(2 * G, G).setZero();
  m.h.segment(3 * G, G) = (1.0 / (m.rd.array() * m.tch.array())).matrix();

  // algebraic block: raw channel weights
  MatrixXd gt = MatrixXd::Zero(2 * G, 5 * G);
  const Eigen::ArrayXd kq = (m.xq - m.xdp).array() / (2.0 * m.xdp.array() * m.xq.array());
  const Eigen::ArrayXd kpq = (m.xdp + m.xq).array() / (2.0 * m.xdp.array() * m.xq.array());
  gt.block(0, 0, G, G) = m.xdp.cwiseInverse().asDiagonal();
  gt.block(0, G, G, G) = (-kq).matrix().asDiagonal();
  gt.block(G, 2 * G, G, G) = m.xdp.cwiseInverse().asDiagonal();
  gt.block(G, 3 * G, G, G) = (-kpq).matrix().asDiagonal();
  gt.block(G, 4 * G, G, G) = (-kq).matrix().asDiagonal();
  m.G_a_raw = MatrixXd::Zero(ix.n_a, ix.n_fa);
  m.G_a_raw.block(0, 0, 2 * G, 5 * G) = gt;
  m.G_a_raw.block(2 * G, 5 * G, 2 * N, 2 * N) = -MatrixXd::Identity(2 * N, 2 * N);

  MatrixXd a_struct = MatrixXd::Zero(ix.n_a, ix.n_a);
  a_struct.block(0, 0, 2 * G, 2 * G) = -MatrixXd::Identity(2 * G, 2 * G);
  for (int k = 0; k < G; ++k) {
    a_struct(2 * G + ix.gen_bus[k], k) += 1.0;
    a_struct(2 * G + N + ix.gen_bus[k], G + k) += 1.0;
  }

  const int R = static_cast<int>(ix.ren_bus.size());
  const int L = static_cast<int>(ix.load_bus.size());
  m.B_a = MatrixXd::Zero(ix.n_a, ix.n_q);
  for (int k = 0; k < R; ++k) {
    m.B_a(2 * G + ix.ren_bus[k], k) = 1.0;
    m.B_a(2 * G + N + ix.ren_bus[k], R + k) = 1.0;
  }
  for (int k = 0; k < L; ++k) {
    m.B_a(2 * G + ix.load_bus[k], 2 * R + k) = 1.0;
    m.B_a(2 * G + N + ix.load_bus[k], 2 * R + L + k) = 1.0;
  }

  // neutral reference completion: move the reference linearization of the
  // raw channels into A_a
  VectorXd x_ref_d(ix.n_d), x_ref_a(ix.n_a);
  x_ref_d.setZero();
  x_ref_d.segment(G, G).setConstant(m.omega0);
  x_ref_d.segment(2 * G, G).setOnes();
  x_ref_a.setZero();
  x_ref_a.segment(ix.v0(), N).setOnes();
  MatrixXd jref_xd, jref_xa;
  m.raw_channel_jacobians(x_ref_d, x_ref_a, jref_xd, jref_xa);
  m.C_ref = jref_xa;
  m.A_a = a_struct + m.G_a_raw * m.C_ref;
  m.G_a = m.G_a_raw * m.channel_scale;

  // the declared block shapes must tile the matrices exactly
  if (m.A_d.rows() != 4 * G || m.A_a.rows() != 2 * G + 2 * N ||
      m.G_a.cols() != 5 * G + 2 * N || m.B_a.cols() != ix.n_q)
    throw std::logic_error("ndae assembly: block shape mismatch");
  return m;
}

inline Residual eval_residual(const NdaeModel& m, const VectorXd& x_d, const VectorXd& xdot_d,
                              const VectorXd& x_a, const VectorXd& u, const VectorXd& q) {
  detail::check_size(x_d, m.n_d(), "x_d");
  detail::check_size(xdot_d, m.n_d(), "xdot_d");
  detail::check_size(x_a, m.n_a(), "x_a");
  detail::check_size(u, m.n_u(), "u");
  detail::check_size(q, m.n_q(), "q");
  detail::check_finite(x_d, "x_d");
  detail::check_finite(xdot_d, "xdot_d");
  detail::check_finite(x_a, "x_a");
  detail::check_finite(u, "u");
  detail::check_finite(q, "q");
  Residual r;
  r.r_d = xdot_d - m.dynamic_rhs(x_d, x_a, u);
  r.r_a = m.algebraic_residual(x_d, x_a, q);
  return r;
}

inline Jacobians eval_jacobians(const NdaeModel& m, const VectorXd& x_d, const VectorXd& x_a,
                                const VectorXd& u) {
  detail::check_size(x_d, m.n_d(), "x_d");
  detail::check_size(x_a, m.n_a(), "x_a");
  detail::check_finite(x_d, "x_d");
  detail::check_finite(x_a, "x_a");
  (void)u;  // the rhs is affine in u
  const int G = m.idx.n_gen;
  Jacobians J;
  // d f_d / dx
  MatrixXd jfd_xd = MatrixXd::Zero(m.idx.n_fd, m.n_d());
  MatrixXd jfd_xa = MatrixXd::Zero(m.idx.n_fd, m.n_a());
  for (int k = 0; k < G; ++k) {
    const int b = m.idx.gen_bus[k];
    const double a = x_d(m.idx.delta0() + k) - x_a(m.idx.theta0() + b);
    const double vb = x_a(m.idx.v0() + b);
    jfd_xa(k, m.idx.pg0() + k) = 1.0;
    jfd_xd(G + k, m.idx.delta0() + k) = -vb * std::sin(a);
    jfd_xa(G + k, m.idx.v0() + b) = std::cos(a);
    jfd_xa(G + k, m.idx.theta0() + b) = vb * std::sin(a);
  }
  J.f_xd = m.A_d + m.G_d * jfd_xd;
  J.f_xa = m.G_d * jfd_xa;
  // d r_a / dx: A_a + G_a_raw (J_raw - C_ref); the channel scale cancels
  MatrixXd jraw_xd, jraw_xa;
  m.raw_channel_jacobians(x_d, x_a, jraw_xd, jraw_xa);
  J.g_xd = m.G_a_raw * jraw_xd;
  J.g_xa = m.A_a + m.G_a_raw * (jraw_xa - m.C_ref);
  return J;
}

struct IndexOneReport {
  bool index_one = false;
  double smallest_singular_value = 0.0;
  double rank_tol = 0.0;
};

/// Assumption-2 check on the full algebraic Jacobian d r_a / d x_a.
inline IndexOneReport check_index_one(const NdaeModel& m, const VectorXd& x_d,
                                      const VectorXd& x_a) {
  const Jacobians J = eval_jacobians(m, x_d, x_a, VectorXd::Zero(m.n_u()));
  Eigen::JacobiSVD<MatrixXd> svd(J.g_xa);
  const VectorXd s = svd.singularValues();
  IndexOneReport rep;
  rep.smallest_singular_value = s(s.size() - 1);
  rep.rank_tol = 1e-8 * s(0);
  rep.index_one = rep.smallest_singular_value > rep.rank_tol;
  return rep;
}

}  // namespace gridctl
