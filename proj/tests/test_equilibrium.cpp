#include <gtest/gtest.h>

#include "gridctl/baselines.hpp"
#include "gridctl/equilibrium.hpp"
#include "gridctl/ndae.hpp"
#include "gridctl/powerflow.hpp"
#include "oracles.hpp"

using namespace gridctl;
namespace gt = gridctl::testing;

namespace {

struct Fixture {
  NetworkCase net;
  AdmittanceMatrix ybus;
  NdaeModel model;
  PfSolution pf;
  OperatingPoint op;
};

Fixture make_fixture(const std::string& name) {
  Fixture f;
  f.net = attach_renewables(load_case(gt::data_path(name)));
  f.ybus = build_admittance(f.net);
  f.model = assemble_model(f.net, f.ybus);
  f.pf = solve_power_flow(f.net, f.ybus, 1e-10);
  f.op = steady_state(f.model, f.pf, f.model.scheduled_q());
  return f;
}

}  // namespace

TEST(Equilibrium, UnloadedSingleMachineRestsAtZeroPower) {
  NetworkCase c;
  c.name = "one-bus";
  c.buses = {Bus{1, BusKind::Slack, 1.0}};
  GeneratorParams g;
  g.bus = 1;
  g.inertia_m = 0.1;
  g.damping_d = 0.01;
  g.x_d = 1.0;
  g.x_q = 0.9;
  g.x_d_prime = 0.3;
  g.t_d0_prime = 5.0;
  c.generators = {g};
  const AdmittanceMatrix y = build_admittance(c);
  const NdaeModel m = assemble_model(c, y);
  const PfSolution pf = solve_power_flow(c, y, 1e-12);
  const OperatingPoint op = steady_state(m, pf, m.scheduled_q());
  EXPECT_NEAR(op.x_d_k(0), 0.0, 1e-10);                 // delta
  EXPECT_NEAR(op.x_d_k(3), 0.0, 1e-10);                 // T_M
  EXPECT_NEAR(op.u_ref_k(1), 0.0, 1e-10);               // T_r
  EXPECT_NEAR(op.x_d_k(2), 1.0, 1e-10);                 // E' of an unloaded machine
  EXPECT_NEAR(op.u_ref_k(0), 1.0, 1e-10);               // E_fd
}

TEST(Equilibrium, NineBusScheduleIsExactRestPoint) {
  const Fixture f = make_fixture("ieee9.json");
  EXPECT_LT(f.op.residual_norm, 1e-8);
  const int G = f.model.idx.n_gen;
  for (int k = 0; k < G; ++k)
    EXPECT_DOUBLE_EQ(f.op.x_d_k(f.model.idx.omega0_() + k), f.model.omega0);
  // residual re-checked by the direct-equation oracle
  const VectorXd rd =
      gt::direct_dynamic_rhs(f.net, f.op.x_d_k, f.op.x_a_k, f.op.u_ref_k);
  const VectorXd ra = gt::direct_algebraic_residual(f.net, f.ybus, f.op.x_d_k, f.op.x_a_k,
                                                    f.op.q_k);
  EXPECT_LT(rd.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(ra.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Equilibrium, AllFixturesProduceRestPoints) {
  for (const char* name : {"ieee14.json", "ieee39.json", "ieee57.json"}) {
    const Fixture f = make_fixture(name);
    EXPECT_LT(f.op.residual_norm, 1e-8) << name;
  }
}

TEST(Equilibrium, PerturbedInputBreaksRest) {
  const Fixture f = make_fixture("ieee9.json");
  VectorXd u = f.op.u_ref_k * 1.01;
  const Residual r = eval_residual(f.model, f.op.x_d_k, VectorXd::Zero(f.model.n_d()),
                                   f.op.x_a_k, u, f.op.q_k);
  EXPECT_GT(r.r_d.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Equilibrium, UndisturbedPostEquilibriumIsTheSchedule) {
  const Fixture f = make_fixture("ieee9.json");
  const MatrixXd K = default_lqr_gain(f.model, f.op);
  const auto [xde, xae] = post_disturbance_equilibrium(f.model, K, f.op, f.op.q_k);
  EXPECT_LT((xde - f.op.x_d_k).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((xae - f.op.x_a_k).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Equilibrium, PostDisturbanceRestoresFrequencyExactly) {
  const Fixture f = make_fixture("ieee9.json");
  const MatrixXd K = default_lqr_gain(f.model, f.op);
  VectorXd q_e = f.op.q_k;
  const int R2 = 2 * static_cast<int>(f.model.idx.ren_bus.size());
  q_e.head(R2) *= (1.0 - 0.04);
  q_e.tail(q_e.size() - R2) *= (1.0 + 0.04);
  const auto [xde, xae] = post_disturbance_equilibrium(f.model, K, f.op, q_e);
  const int G = f.model.idx.n_gen;
  EXPECT_LT((xde.segment(G, G).array() - f.model.omega0).abs().maxCoeff(), 1e-9);
  // it is a rest point of the closed loop
  const VectorXd u = f.op.u_ref_k + K * (xde - f.op.x_d_k);
  EXPECT_LT(f.model.dynamic_rhs(xde, xae, u).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(f.model.algebraic_residual(xde, xae, q_e).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Equilibrium, AbsurdDisturbanceLeavesBasin) {
  const Fixture f = make_fixture("ieee9.json");
  const MatrixXd K = default_lqr_gain(f.model, f.op);
  VectorXd q_e = f.op.q_k * 11.0;  // rho_L = 10
  EXPECT_THROW(post_disturbance_equilibrium(f.model, K, f.op, q_e), ConvergenceError);
}

TEST(Equilibrium, GainShapeChecked) {
  const Fixture f = make_fixture("ieee9.json");
  EXPECT_THROW(post_disturbance_equilibrium(f.model, MatrixXd::Zero(2, 2), f.op, f.op.q_k),
               std::invalid_argument);
}
