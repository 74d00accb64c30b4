#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "gridctl/netcase.hpp"
#include "gridctl/powerflow.hpp"
#include "oracles.hpp"

using namespace gridctl;
namespace gt = gridctl::testing;

TEST(NetCase, LoadsNineBusFixture) {
  const NetworkCase c = load_case(gt::data_path("ieee9.json"));
  EXPECT_EQ(c.n_bus(), 9);
  EXPECT_EQ(c.n_gen(), 3);
  double pl = 0, ql = 0;
  for (const Bus& b : c.buses) {
    pl += b.p_load;
    ql += b.q_load;
  }
  EXPECT_NEAR(pl, 3.15, 1e-12);
  EXPECT_NEAR(ql, 1.15, 1e-12);
}

TEST(NetCase, LoadsFourteenBusFixture) {
  const NetworkCase c = load_case(gt::data_path("ieee14.json"));
  EXPECT_EQ(c.n_bus(), 14);
  EXPECT_EQ(c.n_gen(), 5);
}

TEST(NetCase, TwoSlackBusesRejected) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  c.buses[1].kind = BusKind::Slack;
  EXPECT_THROW(validate_case(c), ValidationError);
}

TEST(NetCase, DanglingBranchRejected) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  c.branches[0].to = 42;
  EXPECT_THROW(validate_case(c), ValidationError);
}

TEST(NetCase, NonPositiveInertiaRejected) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  c.generators[0].inertia_m = 0.0;
  EXPECT_THROW(validate_case(c), ValidationError);
}

TEST(NetCase, SingleBranchAdmittanceByHand) {
  NetworkCase c;
  c.name = "two-bus";
  c.buses = {Bus{1, BusKind::Slack, 1.0}, Bus{2, BusKind::PQ, 1.0}};
  c.branches = {Branch{1, 2, 0.0, 0.1, 0.0, 1.0}};
  c.generators = {GeneratorParams{1, 0.0, 0.1, 0.0, 0.2, 0.19, 0.1, 5.0, 0.2, 0.02}};
  const AdmittanceMatrix y = build_admittance(c);
  // series admittance 1/(j0.1) = -j10 stamped on the 2x2
  EXPECT_NEAR(y.B(0, 1), 10.0, 1e-12);
  EXPECT_NEAR(y.B(1, 0), 10.0, 1e-12);
  EXPECT_NEAR(y.B(0, 0), -10.0, 1e-12);
  EXPECT_NEAR(y.B(1, 1), -10.0, 1e-12);
  EXPECT_NEAR(y.G.cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(NetCase, EmptyBranchListGivesZeroMatrices) {
  NetworkCase c;
  c.name = "island";
  c.buses = {Bus{1, BusKind::Slack, 1.0}};
  c.generators = {GeneratorParams{1, 0.0, 0.1, 0.0, 0.2, 0.19, 0.1, 5.0, 0.2, 0.02}};
  const AdmittanceMatrix y = build_admittance(c);
  EXPECT_EQ(y.G.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(y.B.cwiseAbs().maxCoeff(), 0.0);
}

TEST(NetCase, ZeroReactanceBranchRejected) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  c.branches[3].x = 0.0;
  EXPECT_THROW(build_admittance(c), ValidationError);
}

// Kirchhoff consistency: with shunts and taps removed, every Y-bus row sums
// to zero.
TEST(NetCase, RowSumsVanishWithoutShunts) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  for (Branch& b : c.branches) {
    b.b_sh = 0.0;
    b.tap = 1.0;
  }
  for (Bus& b : c.buses) b.b_shunt = 0.0;
  const AdmittanceMatrix y = build_admittance(c);
  for (int i = 0; i < c.n_bus(); ++i) {
    EXPECT_NEAR(y.G.row(i).sum(), 0.0, 1e-12);
    EXPECT_NEAR(y.B.row(i).sum(), 0.0, 1e-12);
  }
}

TEST(NetCase, SaveLoadRoundTrip) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee14.json")));
  const std::string tmp = std::filesystem::temp_directory_path() / "roundtrip_case.json";
  save_case(c, tmp);
  const NetworkCase c2 = load_case(tmp);
  ASSERT_EQ(c2.n_bus(), c.n_bus());
  ASSERT_EQ(c2.branches.size(), c.branches.size());
  ASSERT_EQ(c2.n_gen(), c.n_gen());
  for (int i = 0; i < c.n_bus(); ++i) {
    EXPECT_EQ(c2.buses[i].kind, c.buses[i].kind);
    EXPECT_DOUBLE_EQ(c2.buses[i].v_set, c.buses[i].v_set);
    EXPECT_DOUBLE_EQ(c2.buses[i].p_load, c.buses[i].p_load);
    EXPECT_DOUBLE_EQ(c2.buses[i].q_load, c.buses[i].q_load);
    EXPECT_EQ(c2.buses[i].has_renewable, c.buses[i].has_renewable);
    EXPECT_DOUBLE_EQ(c2.buses[i].p_ren, c.buses[i].p_ren);
  }
  for (size_t i = 0; i < c.branches.size(); ++i) {
    EXPECT_DOUBLE_EQ(c2.branches[i].x, c.branches[i].x);
    EXPECT_DOUBLE_EQ(c2.branches[i].tap, c.branches[i].tap);
  }
  for (int i = 0; i < c.n_gen(); ++i)
    EXPECT_DOUBLE_EQ(c2.generators[i].inertia_m, c.generators[i].inertia_m);
  std::filesystem::remove(tmp);
}

TEST(NetCase, RenewablesEveryLoadBusSplitsTotal) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  double total = 0.0;
  int n_ren = 0;
  for (const Bus& b : c.buses) {
    if (b.has_renewable) {
      ++n_ren;
      total += b.p_ren;
      EXPECT_DOUBLE_EQ(b.q_ren, 0.0);
    }
  }
  EXPECT_EQ(n_ren, 3);
  EXPECT_NEAR(total, 0.63, 1e-12);
}

TEST(NetCase, RenewableThresholdRule) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee39.json")));
  for (const Bus& b : c.buses)
    EXPECT_EQ(b.has_renewable, b.p_load >= 3.0) << "bus " << b.id;
}

TEST(NetCase, ThresholdMatchingNothingFlagsWarning) {
  NetworkCase c = load_case(gt::data_path("ieee9.json"));
  c.renewable_rule.kind = RenewableRule::Kind::Threshold;
  c.renewable_rule.p_min = 1e9;
  const NetworkCase out = attach_renewables(c);
  EXPECT_TRUE(out.renewable_rule_matched_none);
  for (const Bus& b : out.buses) EXPECT_FALSE(b.has_renewable);
}

TEST(NetCase, AttachOnlyTouchesMatchedBuses) {
  NetworkCase c = load_case(gt::data_path("ieee57.json"));
  const NetworkCase out = attach_renewables(c);
  for (int i = 0; i < c.n_bus(); ++i) {
    const bool matched = c.buses[i].p_load >= c.renewable_rule.p_min &&
                         (c.buses[i].p_load != 0 || c.buses[i].q_load != 0);
    if (!matched) {
      EXPECT_EQ(out.buses[i].has_renewable, c.buses[i].has_renewable);
      EXPECT_DOUBLE_EQ(out.buses[i].p_ren, c.buses[i].p_ren);
    }
    EXPECT_DOUBLE_EQ(out.buses[i].p_load, c.buses[i].p_load);
  }
}

// The fixture Y-bus is trusted only through the power-flow residual it
// produces: at the solved operating point the direct evaluation of the bus
// power balance must close.
TEST(NetCase, NineBusYbusClosesPowerBalance) {
  const NetworkCase c = attach_renewables(load_case(gt::data_path("ieee9.json")));
  const AdmittanceMatrix y = build_admittance(c);
  const PfSolution pf = solve_power_flow(c, y, 1e-10);
  for (int i = 0; i < c.n_bus(); ++i) {
    double sp = 0.0, sq = 0.0;
    for (int j = 0; j < c.n_bus(); ++j) {
      const double tij = pf.theta(i) - pf.theta(j);
      sp += pf.v(i) * pf.v(j) * (y.G(i, j) * std::cos(tij) + y.B(i, j) * std::sin(tij));
      sq += pf.v(i) * pf.v(j) * (y.G(i, j) * std::sin(tij) - y.B(i, j) * std::cos(tij));
    }
    EXPECT_NEAR(sp, pf.p_inj(i), 1e-8);
    EXPECT_NEAR(sq, pf.q_inj(i), 1e-8);
  }
}
