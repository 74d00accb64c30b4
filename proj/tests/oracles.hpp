#pragma once

// Test-only reference implementations, written straight from the governing
// equations and independent of the assembled-model code paths they check.

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "gridctl/netcase.hpp"
#include "gridctl/ndae.hpp"

namespace gridctl::testing {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Dynamic-state derivative evaluated term by term from the machine
/// equations (swing, flux decay, governor), not from the A_d/G_d/B_d split.
inline VectorXd direct_dynamic_rhs(const NetworkCase& net, const VectorXd& x_d,
                                   const VectorXd& x_a, const VectorXd& u) {
  const int G = net.n_gen();
  const int N = net.n_bus();
  VectorXd out(4 * G);
  for (int k = 0; k < G; ++k) {
    const GeneratorParams& g = net.generators[k];
    const int b = g.bus - 1;
    const double delta = x_d(k);
    const double omega = x_d(G + k);
    const double eprime = x_d(2 * G + k);
    const double tm = x_d(3 * G + k);
    const double pg = x_a(k);
    const double v = x_a(2 * G + b);
    const double theta = x_a(2 * G + N + b);
    const double efd = u(k);
    const double tr = u(G + k);
    out(k) = omega - net.omega0;
    out(G + k) = (tm - pg - g.damping_d * (omega - net.omega0)) / g.inertia_m;
    out(2 * G + k) = (-g.x_d / g.x_d_prime * eprime +
                      (g.x_d - g.x_d_prime) / g.x_d_prime * v * std::cos(delta - theta) +
                      efd) /
                     g.t_d0_prime;
    out(3 * G + k) = (-tm - (omega - net.omega0) / g.r_d + tr) / g.t_ch;
  }
  return out;
}

/// Algebraic residual evaluated straight from the machine power equations
/// and the bus power balance, with an explicit double loop over the
/// admittance entries.
inline VectorXd direct_algebraic_residual(const NetworkCase& net, const AdmittanceMatrix& y,
                                          const VectorXd& x_d, const VectorXd& x_a,
                                          const VectorXd& q) {
  const int G = net.n_gen();
  const int N = net.n_bus();
  VectorXd r(2 * G + 2 * N);
  const auto v = [&](int b) { return x_a(2 * G + b); };
  const auto th = [&](int b) { return x_a(2 * G + N + b); };
  for (int k = 0; k < G; ++k) {
    const GeneratorParams& g = net.generators[k];
    const int b = g.bus - 1;
    const double a = x_d(k) - th(b);
    const double kq = (g.x_q - g.x_d_prime) / (2.0 * g.x_d_prime * g.x_q);
    const double kpq = (g.x_d_prime + g.x_q) / (2.0 * g.x_d_prime * g.x_q);
    const double eprime = x_d(2 * G + k);
    r(k) = -x_a(k) + eprime * v(b) * std::sin(a) / g.x_d_prime -
           kq * v(b) * v(b) * std::sin(2 * a);
    r(G + k) = -x_a(G + k) + eprime * v(b) * std::cos(a) / g.x_d_prime -
               kpq * v(b) * v(b) - kq * v(b) * v(b) * std::cos(2 * a);
  }
  for (int i = 0; i < N; ++i) {
    double sp = 0.0, sq = 0.0;
    for (int j = 0; j < N; ++j) {
      const double tij = th(i) - th(j);
      sp += v(i) * v(j) * (y.G(i, j) * std::cos(tij) + y.B(i, j) * std::sin(tij));
      sq += v(i) * v(j) * (y.G(i, j) * std::sin(tij) - y.B(i, j) * std::cos(tij));
    }
    r(2 * G + i) = -sp;
    r(2 * G + N + i) = -sq;
  }
  for (int k = 0; k < G; ++k) {
    const int b = net.generators[k].bus - 1;
    r(2 * G + b) += x_a(k);
    r(2 * G + N + b) += x_a(G + k);
  }
  // q = [P_R; Q_R; P_L; Q_L] stacked over renewable then load buses
  const std::vector<int> ren = net.renewable_buses();
  const std::vector<int> loads = net.load_buses();
  const int R = static_cast<int>(ren.size());
  const int L = static_cast<int>(loads.size());
  for (int k = 0; k < R; ++k) {
    r(2 * G + ren[k]) += q(k);
    r(2 * G + N + ren[k]) += q(R + k);
  }
  for (int k = 0; k < L; ++k) {
    r(2 * G + loads[k]) += q(2 * R + k);
    r(2 * G + N + loads[k]) += q(2 * R + L + k);
  }
  return r;
}

/// Random interior states around a nominal profile.
struct StateSampler {
  std::mt19937_64 rng;
  explicit StateSampler(unsigned seed) : rng(seed) {}

  VectorXd x_d(const NdaeModel& m, double spread = 0.3) {
    std::uniform_real_distribution<double> u(-spread, spread);
    const int G = m.idx.n_gen;
    VectorXd x(m.n_d());
    for (int k = 0; k < G; ++k) {
      x(k) = u(rng);
      x(G + k) = m.omega0 + u(rng);
      x(2 * G + k) = 1.0 + 0.5 * u(rng);
      x(3 * G + k) = 1.0 + u(rng);
    }
    return x;
  }
  VectorXd x_a(const NdaeModel& m, double spread = 0.3) {
    std::uniform_real_distribution<double> u(-spread, spread);
    const int G = m.idx.n_gen, N = m.idx.n_bus;
    VectorXd x(m.n_a());
    for (int k = 0; k < 2 * G; ++k) x(k) = u(rng);
    for (int b = 0; b < N; ++b) {
      x(2 * G + b) = 1.0 + 0.2 * u(rng);
      x(2 * G + N + b) = u(rng);
    }
    return x;
  }
  VectorXd vec(int n, double spread = 0.5) {
    std::uniform_real_distribution<double> u(-spread, spread);
    VectorXd x(n);
    for (int i = 0; i < n; ++i) x(i) = u(rng);
    return x;
  }
};

inline std::string data_path(const std::string& name) {
  return std::string(GRIDCTL_DATA_DIR) + "/" + name;
}

}  // namespace gridctl::testing
