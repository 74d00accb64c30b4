#include <gtest/gtest.h>

#include "gridctl/netcase.hpp"
#include "gridctl/powerflow.hpp"
#include "oracles.hpp"

using namespace gridctl;
namespace gt = gridctl::testing;

namespace {

NetworkCase lossless_two_bus() {
  NetworkCase c;
  c.name = "two-bus";
  c.buses = {Bus{1, BusKind::Slack, 1.0}, Bus{2, BusKind::PQ, 1.0}};
  c.branches = {Branch{1, 2, 0.0, 0.1, 0.0, 1.0}};
  c.generators = {GeneratorParams{1, 0.0, 0.1, 0.01, 0.2, 0.19, 0.1, 5.0, 0.2, 0.02}};
  return c;
}

}  // namespace

TEST(PowerFlow, NoLoadGivesFlatSolution) {
  const NetworkCase c = lossless_two_bus();
  const PfSolution pf = solve_power_flow(c, build_admittance(c), 1e-12);
  EXPECT_NEAR(pf.v(0), 1.0, 1e-12);
  EXPECT_NEAR(pf.v(1), 1.0, 1e-12);
  EXPECT_NEAR(pf.theta.cwiseAbs().maxCoeff(), 0.0, 1e-12);
  EXPECT_NEAR(pf.p_inj.cwiseAbs().maxCoeff(), 0.0, 1e-10);
  EXPECT_NEAR(pf.q_inj.cwiseAbs().maxCoeff(), 0.0, 1e-10);
}

TEST(PowerFlow, NineBusResidualAgainstDirectEvaluation) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  const AdmittanceMatrix y = build_admittance(c);
  const PfSolution pf = solve_power_flow(c, y, 1e-10);
  EXPECT_LT(pf.residual_norm, 1e-8);
  // independent mismatch: specified injections minus direct power sums
  for (int i = 0; i < c.n_bus(); ++i) {
    const Bus& b = c.buses[i];
    if (b.kind == BusKind::Slack) continue;
    double p_spec = b.p_ren - b.p_load;
    for (const GeneratorParams& g : c.generators)
      if (g.bus == b.id) p_spec += g.p_sched;
    double sp = 0.0, sq = 0.0;
    for (int j = 0; j < c.n_bus(); ++j) {
      const double tij = pf.theta(i) - pf.theta(j);
      sp += pf.v(i) * pf.v(j) * (y.G(i, j) * std::cos(tij) + y.B(i, j) * std::sin(tij));
      sq += pf.v(i) * pf.v(j) * (y.G(i, j) * std::sin(tij) - y.B(i, j) * std::cos(tij));
    }
    EXPECT_NEAR(sp, p_spec, 1e-8) << "bus " << b.id;
    if (b.kind == BusKind::PQ) EXPECT_NEAR(sq, b.q_ren - b.q_load, 1e-8) << "bus " << b.id;
  }
}

TEST(PowerFlow, InfeasibleLoadingSignalsError) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  for (Bus& b : c.buses) {
    b.p_load *= 50.0;
    b.q_load *= 50.0;
  }
  EXPECT_THROW(solve_power_flow(attach_renewables(c), build_admittance(c), 1e-10, 25),
               ConvergenceError);
}

// Active-power budget: generation = load - renewables + network losses,
// with losses computed independently from branch currents.
TEST(PowerFlow, ActivePowerBudgetCloses) {
  for (const char* name : {"ieee9.json", "ieee14.json", "ieee39.json", "ieee57.json"}) {
    const NetworkCase c = attach_renewables(load_case(gt::data_path(name)));
    const AdmittanceMatrix y = build_admittance(c);
    const PfSolution pf = solve_power_flow(c, y, 1e-10);
    double loss = 0.0;
    for (const Branch& br : c.branches) {
      const int f = br.from - 1, t = br.to - 1;
      const std::complex<double> vf = std::polar(pf.v(f), pf.theta(f));
      const std::complex<double> vt = std::polar(pf.v(t), pf.theta(t));
      const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
      const std::complex<double> i_ser = (vf / br.tap - vt) * ys;
      loss += br.r * std::norm(i_ser);
    }
    EXPECT_NEAR(pf.p_inj.sum(), loss, 1e-6) << name;
  }
}

TEST(PowerFlow, ConvergesWithinTenIterationsOnFixtures) {
  for (const char* name : {"ieee9.json", "ieee14.json", "ieee39.json", "ieee57.json"}) {
    const NetworkCase c = attach_renewables(load_case(gt::data_path(name)));
    const PfSolution pf = solve_power_flow(c, build_admittance(c), 1e-10);
    EXPECT_LE(pf.iterations, 10) << name;
    EXPECT_GT(pf.v.minCoeff(), 0.0) << name;
    EXPECT_NEAR(pf.theta(c.slack_index()), 0.0, 0.0) << name;
  }
}
