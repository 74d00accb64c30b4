#include <gtest/gtest.h>

#include "gridctl/equilibrium.hpp"
#include "gridctl/ndae.hpp"
#include "gridctl/powerflow.hpp"
#include "oracles.hpp"

using namespace gridctl;
namespace gt = gridctl::testing;

namespace {

NdaeModel fixture_model(const std::string& name) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path(name)));
  return assemble_model(c, build_admittance(c));
}

NetworkCase single_machine_case(double m_in, double d_in) {
  NetworkCase c;
  c.name = "one-bus";
  c.buses = {Bus{1, BusKind::Slack, 1.0}};
  GeneratorParams g;
  g.bus = 1;
  g.inertia_m = m_in;
  g.damping_d = d_in;
  g.x_d = 1.0;
  g.x_q = 0.9;
  g.x_d_prime = 0.3;
  g.t_d0_prime = 5.0;
  g.t_ch = 0.2;
  g.r_d = 0.02;
  c.generators = {g};
  return c;
}

}  // namespace

TEST(Ndae, SingleMachineBlockEntries) {
  const NetworkCase c = single_machine_case(2.0, 1.0);
  const NdaeModel m = assemble_model(c, build_admittance(c));
  // omega row: [0, -D/M, 0, 1/M]
  EXPECT_DOUBLE_EQ(m.A_d(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(m.A_d(1, 1), -0.5);
  EXPECT_DOUBLE_EQ(m.A_d(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(m.A_d(1, 3), 0.5);
  // flux row diagonal: -x_d / (x_d' T_d0')
  EXPECT_DOUBLE_EQ(m.A_d(2, 2), -1.0 / (0.3 * 5.0));
}

// The printed sign conventions of the constant vector h do not close the
// residual against the governing equations; the assembled h uses the signs
// that do (leading delta-block entry is -1).
TEST(Ndae, ConstantVectorForUnitMachine) {
  const NetworkCase c = single_machine_case(2.0, 1.0);
  const NdaeModel m = assemble_model(c, build_admittance(c));
  VectorXd expected(4);
  expected << -1.0, 0.5, 0.0, 250.0;
  EXPECT_NEAR((m.h - expected).cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(Ndae, DeltaBlockSelectsOmega) {
  const NdaeModel m = fixture_model("ieee9.json");
  const int G = m.idx.n_gen;
  EXPECT_TRUE(m.A_d.block(0, G, G, G).isIdentity(0.0));
  EXPECT_EQ(m.A_d.block(0, 0, G, G).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(m.A_d.block(0, 2 * G, G, 2 * G).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ndae, BdRowsZeroOutsideFluxAndGovernor) {
  const NdaeModel m = fixture_model("ieee9.json");
  const int G = m.idx.n_gen;
  EXPECT_EQ(m.B_d.topRows(2 * G).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ndae, ResidualMatchesDirectEquationsOnRandomStates) {
  for (const char* name : {"ieee9.json", "ieee14.json"}) {
    const NetworkCase c = attach_renewables(load_case(gt::data_path(name)));
    const AdmittanceMatrix y = build_admittance(c);
    const NdaeModel m = assemble_model(c, y);
    gt::StateSampler s(2024);
    for (int trial = 0; trial < 40; ++trial) {
      const VectorXd xd = s.x_d(m), xa = s.x_a(m);
      const VectorXd u = s.vec(m.n_u());
      const VectorXd q = s.vec(m.n_q());
      const VectorXd xdot = s.vec(m.n_d());
      const Residual r = eval_residual(m, xd, xdot, xa, u, q);
      const VectorXd rd_ref = xdot - gt::direct_dynamic_rhs(c, xd, xa, u);
      const VectorXd ra_ref = gt::direct_algebraic_residual(c, y, xd, xa, q);
      EXPECT_LT((r.r_d - rd_ref).cwiseAbs().maxCoeff(), 1e-10) << name;
      EXPECT_LT((r.r_a - ra_ref).cwiseAbs().maxCoeff(), 1e-10) << name;
    }
  }
}

TEST(Ndae, ResidualVanishesAtEquilibrium) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  const AdmittanceMatrix y = build_admittance(c);
  const NdaeModel m = assemble_model(c, y);
  const PfSolution pf = solve_power_flow(c, y, 1e-10);
  const OperatingPoint op = steady_state(m, pf, m.scheduled_q());
  const Residual r =
      eval_residual(m, op.x_d_k, VectorXd::Zero(m.n_d()), op.x_a_k, op.u_ref_k, op.q_k);
  EXPECT_LT(r.r_d.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(r.r_a.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Ndae, ZeroStateCancelsConstantTerm) {
  const NdaeModel m = fixture_model("ieee9.json");
  const VectorXd zero_d = VectorXd::Zero(m.n_d());
  const VectorXd zero_a = VectorXd::Zero(m.n_a());
  const VectorXd xdot = -m.h * m.omega0;
  const Residual r = eval_residual(m, zero_d, xdot, zero_a, VectorXd::Zero(m.n_u()),
                                   VectorXd::Zero(m.n_q()));
  EXPECT_LT(r.r_d.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ndae, NonFiniteInputRejected) {
  const NdaeModel m = fixture_model("ieee9.json");
  VectorXd xd = VectorXd::Zero(m.n_d());
  xd(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(eval_residual(m, xd, VectorXd::Zero(m.n_d()), VectorXd::Zero(m.n_a()),
                             VectorXd::Zero(m.n_u()), VectorXd::Zero(m.n_q())),
               std::invalid_argument);
}

TEST(Ndae, JacobiansMatchCentralDifferences) {
  const NdaeModel m = fixture_model("ieee9.json");
  gt::StateSampler s(99);
  const double step = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    const VectorXd xd = s.x_d(m, 0.2), xa = s.x_a(m, 0.2);
    const VectorXd u = s.vec(m.n_u());
    const Jacobians J = eval_jacobians(m, xd, xa, u);
    double max_rel = 0.0;
    auto update = [&](double got, double ref) {
      const double denom = std::max(1.0, std::abs(ref));
      max_rel = std::max(max_rel, std::abs(got - ref) / denom);
    };
    for (int k = 0; k < m.n_d(); ++k) {
      VectorXd xp = xd, xm = xd;
      xp(k) += step;
      xm(k) -= step;
      const VectorXd df = (m.dynamic_rhs(xp, xa, u) - m.dynamic_rhs(xm, xa, u)) / (2 * step);
      const VectorXd dg = (m.algebraic_residual(xp, xa, VectorXd::Zero(m.n_q())) -
                           m.algebraic_residual(xm, xa, VectorXd::Zero(m.n_q()))) /
                          (2 * step);
      for (int i = 0; i < m.n_d(); ++i) update(J.f_xd(i, k), df(i));
      for (int i = 0; i < m.n_a(); ++i) update(J.g_xd(i, k), dg(i));
    }
    for (int k = 0; k < m.n_a(); ++k) {
      VectorXd xp = xa, xm = xa;
      xp(k) += step;
      xm(k) -= step;
      const VectorXd df = (m.dynamic_rhs(xd, xp, u) - m.dynamic_rhs(xd, xm, u)) / (2 * step);
      const VectorXd dg = (m.algebraic_residual(xd, xp, VectorXd::Zero(m.n_q())) -
                           m.algebraic_residual(xd, xm, VectorXd::Zero(m.n_q()))) /
                          (2 * step);
      for (int i = 0; i < m.n_d(); ++i) update(J.f_xa(i, k), df(i));
      for (int i = 0; i < m.n_a(); ++i) update(J.g_xa(i, k), dg(i));
    }
    EXPECT_LT(max_rel, 1e-5);
  }
}

TEST(Ndae, DynamicJacobianContainsConstantPart) {
  const NdaeModel m = fixture_model("ieee9.json");
  gt::StateSampler s(5);
  const Jacobians J = eval_jacobians(m, s.x_d(m), s.x_a(m), VectorXd::Zero(m.n_u()));
  // rows without nonlinear terms (delta block, governor block) equal A_d
  const int G = m.idx.n_gen;
  EXPECT_LT((J.f_xd.topRows(G) - m.A_d.topRows(G)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((J.f_xd.bottomRows(G) - m.A_d.bottomRows(G)).cwiseAbs().maxCoeff(), 1e-14);
}

// An isolated machine bus with zero admittance: the power-balance rows have
// no angle coupling, so their theta columns vanish identically.
TEST(Ndae, IsolatedBusBalanceRowsHaveNoAngleCoupling) {
  const NetworkCase c = single_machine_case(2.0, 1.0);
  const NdaeModel m = assemble_model(c, build_admittance(c));
  gt::StateSampler s(3);
  const Jacobians J = eval_jacobians(m, s.x_d(m), s.x_a(m), VectorXd::Zero(m.n_u()));
  const int G = 1, N = 1;
  // rows 2G..2G+2N are the balance rows; theta column is the last one
  for (int r = 2 * G; r < 2 * G + 2 * N; ++r)
    EXPECT_NEAR(J.g_xa(r, m.idx.theta0()), 0.0, 1e-14) << "row " << r;
}

TEST(Ndae, IndexOneAtEquilibriumAndNotAtCollapse) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  const AdmittanceMatrix y = build_admittance(c);
  const NdaeModel m = assemble_model(c, y);
  const PfSolution pf = solve_power_flow(c, y, 1e-10);
  const OperatingPoint op = steady_state(m, pf, m.scheduled_q());
  const IndexOneReport ok = check_index_one(m, op.x_d_k, op.x_a_k);
  EXPECT_TRUE(ok.index_one);
  EXPECT_GT(ok.smallest_singular_value, ok.rank_tol);

  VectorXd collapsed = op.x_a_k;
  collapsed.segment(m.idx.v0(), m.idx.n_bus).setZero();
  const IndexOneReport bad = check_index_one(m, op.x_d_k, collapsed);
  EXPECT_FALSE(bad.index_one);
}

// The channel-scale parameter reweights the nonlinearity split but the
// residual itself is split-invariant.
TEST(Ndae, ResidualIndependentOfChannelScale) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  const AdmittanceMatrix y = build_admittance(c);
  NdaeOptions o1, o2;
  o1.channel_scale = 0.02;
  o2.channel_scale = 0.5;
  const NdaeModel m1 = assemble_model(c, y, o1);
  const NdaeModel m2 = assemble_model(c, y, o2);
  gt::StateSampler s(77);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd xd = s.x_d(m1), xa = s.x_a(m1), q = s.vec(m1.n_q());
    EXPECT_LT((m1.algebraic_residual(xd, xa, q) - m2.algebraic_residual(xd, xa, q))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-11);
  }
}
