#pragma once

// Static network case data: buses, branches, generators, renewables, and
// the bus admittance matrix.

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace gridctl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kOmega0 = 2.0 * std::numbers::pi * 60.0;  // rad/s

/// Error while parsing a case file.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Case data violates an invariant (missing slack, dangling branch, ...).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Iterative solve failed to reach tolerance.
struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class BusKind { Slack, PV, PQ };

struct Bus {
  int id = 0;               // 1-based, contiguous
  BusKind kind = BusKind::PQ;
  double v_set = 1.0;       // pu, used for slack/PV
  double p_load = 0.0;      // pu consumption (>= 0 by convention)
  double q_load = 0.0;      // pu
  double b_shunt = 0.0;     // pu shunt susceptance at the bus
  bool has_renewable = false;
  double p_ren = 0.0;       // pu injection
  double q_ren = 0.0;       // pu injection
};

struct Branch {
  int from = 0, to = 0;     // bus ids
  double r = 0.0, x = 0.0;  // pu series impedance
  double b_sh = 0.0;        // pu total line-charging susceptance
  double tap = 1.0;         // off-nominal turns ratio at the from side
};

struct GeneratorParams {
  int bus = 0;
  double p_sched = 0.0;     // pu scheduled active power (ignored at slack)
  double inertia_m = 0.0;   // M, pu s^2
  double damping_d = 0.0;   // D, pu s
  double x_d = 0.0;         // pu
  double x_q = 0.0;         // pu
  double x_d_prime = 0.0;   // pu
  double t_d0_prime = 0.0;  // s
  double t_ch = 0.2;        // s
  double r_d = 0.02;        // Hz/pu governor regulation
};

struct RenewableRule {
  enum class Kind { EveryLoadBus, Threshold } kind = Kind::EveryLoadBus;
  double p_min = 0.0;       // pu, for Threshold
  double p_total = 0.0;     // pu, split uniformly over matched buses
  double q_total = 0.0;     // pu
};

struct NetworkCase {
  std::string name;
  double base_mva = 100.0;
  double omega0 = kOmega0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<GeneratorParams> generators;
  RenewableRule renewable_rule;
  bool renewable_rule_applied = false;
  bool renewable_rule_matched_none = false;  // warning flag, see attach_renewables

  int n_bus() const { return static_cast<int>(buses.size()); }
  int n_gen() const { return static_cast<int>(generators.size()); }

  int slack_index() const {
    for (int i = 0; i < n_bus(); ++i)
      if (buses[i].kind == BusKind::Slack) return i;
    throw ValidationError("case has no slack bus");
  }

  std::vector<int> load_buses() const {
    std::vector<int> out;
    for (int i = 0; i < n_bus(); ++i)
      if (buses[i].p_load != 0.0 || buses[i].q_load != 0.0) out.push_back(i);
    return out;
  }

  std::vector<int> renewable_buses() const {
    std::vector<int> out;
    for (int i = 0; i < n_bus(); ++i)
      if (buses[i].has_renewable) out.push_back(i);
    return out;
  }
};

struct AdmittanceMatrix {
  MatrixXd G;  // conductance, pu
  MatrixXd B;  // susceptance, pu
};

inline void validate_case(const NetworkCase& c) {
  const int n = c.n_bus();
  if (n == 0) throw ValidationError(c.name + ": case has no buses");
  int slack_count = 0;
  for (int i = 0; i < n; ++i) {
    const Bus& b = c.buses[i];
    if (b.id != i + 1)
      throw ValidationError(c.name + ": bus ids must be contiguous 1..N, got id " +
                            std::to_string(b.id) + " at position " + std::to_string(i));
    if (b.kind == BusKind::Slack) ++slack_count;
    if (b.kind != BusKind::PQ && b.v_set <= 0.0)
      throw ValidationError(c.name + ": bus " + std::to_string(b.id) + " has v_set <= 0");
  }
  if (slack_count != 1)
    throw ValidationError(c.name + ": expected exactly one slack bus, found " +
                          std::to_string(slack_count));
  for (const Branch& br : c.branches) {
    if (br.from == br.to)
      throw ValidationError(c.name + ": branch connects bus " + std::to_string(br.from) +
                            " to itself");
    if (br.from < 1 || br.from > n || br.to < 1 || br.to > n)
      throw ValidationError(c.name + ": dangling branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to));
    if (br.x == 0.0)
      throw ValidationError(c.name + ": branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has zero reactance");
    if (br.tap <= 0.0)
      throw ValidationError(c.name + ": branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has non-positive tap");
  }
  if (c.generators.empty()) throw ValidationError(c.name + ": case has no generators");
  for (const GeneratorParams& g : c.generators) {
    if (g.bus < 1 || g.bus > n)
      throw ValidationError(c.name + ": generator at unknown bus " + std::to_string(g.bus));
    auto positive = [&](double v, const char* what) {
      if (!(v > 0.0))
        throw ValidationError(c.name + ": generator at bus " + std::to_string(g.bus) +
                              " has non-positive " + what);
    };
    positive(g.inertia_m, "M");
    positive(g.x_d, "x_d");
    positive(g.x_q, "x_q");
    positive(g.x_d_prime, "x_d_prime");
    positive(g.t_d0_prime, "t_d0_prime");
    positive(g.t_ch, "t_ch");
    positive(g.r_d, "r_d");
    if (g.damping_d < 0.0)
      throw ValidationError(c.name + ": generator at bus " + std::to_string(g.bus) +
                            " has negative damping");
    if (g.x_d < g.x_d_prime)
      throw ValidationError(c.name + ": generator at bus " + std::to_string(g.bus) +
                            " has x_d < x_d_prime");
  }
}

namespace detail {

inline BusKind bus_kind_from_string(const std::string& s) {
  if (s == "slack") return BusKind::Slack;
  if (s == "pv") return BusKind::PV;
  if (s == "pq") return BusKind::PQ;
  throw ParseError("unknown bus kind '" + s + "'");
}

inline std::string bus_kind_to_string(BusKind k) {
  switch (k) {
    case BusKind::Slack: return "slack";
    case BusKind::PV: return "pv";
    case BusKind::PQ: return "pq";
  }
  return "pq";
}

}  // namespace detail

inline NetworkCase case_from_json(const nlohmann::json& j) {
  NetworkCase c;
  try {
    c.name = j.value("name", "case");
    c.base_mva = j.value("base_mva", 100.0);
    for (const auto& jb : j.at("buses")) {
      Bus b;
      b.id = jb.at("id").get<int>();
      b.kind = detail::bus_kind_from_string(jb.at("kind").get<std::string>());
      b.v_set = jb.value("v_set", 1.0);
      b.p_load = jb.value("p_load", 0.0);
      b.q_load = jb.value("q_load", 0.0);
      b.b_shunt = jb.value("b_shunt", 0.0);
      b.has_renewable = jb.value("has_renewable", false);
      b.p_ren = jb.value("p_ren", 0.0);
      b.q_ren = jb.value("q_ren", 0.0);
      c.buses.push_back(b);
    }
    for (const auto& jb : j.at("branches")) {
      Branch br;
      br.from = jb.at("from").get<int>();
      br.to = jb.at("to").get<int>();
      br.r = jb.value("r", 0.0);
      br.x = jb.at("x").get<double>();
      br.b_sh = jb.value("b_sh", 0.0);
      br.tap = jb.value("tap", 1.0);
      c.branches.push_back(br);
    }
    for (const auto& jg : j.at("generators")) {
      GeneratorParams g;
      g.bus = jg.at("bus").get<int>();
      g.p_sched = jg.value("p_sched", 0.0);
      g.inertia_m = jg.at("inertia_m").get<double>();
      g.damping_d = jg.value("damping_d", 0.0);
      g.x_d = jg.at("x_d").get<double>();
      g.x_q = jg.at("x_q").get<double>();
      g.x_d_prime = jg.at("x_d_prime").get<double>();
      g.t_d0_prime = jg.at("t_d0_prime").get<double>();
      g.t_ch = jg.value("t_ch", 0.2);
      g.r_d = jg.value("r_d", 0.02);
      c.generators.push_back(g);
    }
    if (j.contains("renewable_rule")) {
      const auto& jr = j.at("renewable_rule");
      const std::string kind = jr.value("kind", "every-load-bus");
      if (kind == "every-load-bus") {
        c.renewable_rule.kind = RenewableRule::Kind::EveryLoadBus;
      } else if (kind == "threshold") {
        c.renewable_rule.kind = RenewableRule::Kind::Threshold;
        c.renewable_rule.p_min = jr.at("p_min").get<double>();
      } else {
        throw ParseError("unknown renewable rule '" + kind + "'");
      }
      c.renewable_rule.p_total = jr.value("p_total", 0.0);
      c.renewable_rule.q_total = jr.value("q_total", 0.0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed case: ") + e.what());
  }
  validate_case(c);
  return c;
}

inline nlohmann::json case_to_json(const NetworkCase& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["base_mva"] = c.base_mva;
  j["buses"] = nlohmann::json::array();
  for (const Bus& b : c.buses) {
    nlohmann::json jb{{"id", b.id},
                      {"kind", detail::bus_kind_to_string(b.kind)},
                      {"v_set", b.v_set},
                      {"p_load", b.p_load},
                      {"q_load", b.q_load}};
    if (b.b_shunt != 0.0) jb["b_shunt"] = b.b_shunt;
    if (b.has_renewable) {
      jb["has_renewable"] = true;
      jb["p_ren"] = b.p_ren;
      jb["q_ren"] = b.q_ren;
    }
    j["buses"].push_back(jb);
  }
  j["branches"] = nlohmann::json::array();
  for (const Branch& br : c.branches) {
    nlohmann::json jb{{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x}};
    if (br.b_sh != 0.0) jb["b_sh"] = br.b_sh;
    if (br.tap != 1.0) jb["tap"] = br.tap;
    j["branches"].push_back(jb);
  }
  j["generators"] = nlohmann::json::array();
  for (const GeneratorParams& g : c.generators) {
    j["generators"].push_back({{"bus", g.bus},
                               {"p_sched", g.p_sched},
                               {"inertia_m", g.inertia_m},
                               {"damping_d", g.damping_d},
                               {"x_d", g.x_d},
                               {"x_q", g.x_q},
                               {"x_d_prime", g.x_d_prime},
                               {"t_d0_prime", g.t_d0_prime},
                               {"t_ch", g.t_ch},
                               {"r_d", g.r_d}});
  }
  nlohmann::json jr;
  jr["kind"] = c.renewable_rule.kind == RenewableRule::Kind::EveryLoadBus ? "every-load-bus"
                                                                          : "threshold";
  if (c.renewable_rule.kind == RenewableRule::Kind::Threshold)
    jr["p_min"] = c.renewable_rule.p_min;
  jr["p_total"] = c.renewable_rule.p_total;
  jr["q_total"] = c.renewable_rule.q_total;
  j["renewable_rule"] = jr;
  return j;
}

inline NetworkCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open case file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("cannot parse '" + path + "': " + e.what());
  }
  return case_from_json(j);
}

inline void save_case(const NetworkCase& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write case file '" + path + "'");
  out << case_to_json(c).dump(2) << "\n";
}

/// Standard Y-bus stamping with taps and line charging.
inline AdmittanceMatrix build_admittance(const NetworkCase& c) {
  const int n = c.n_bus();
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(n, n);
  for (const Branch& br : c.branches) {
    if (br.x == 0.0)
      throw ValidationError(c.name + ": zero-reactance branch " + std::to_string(br.from) +
                            "-" + std::to_string(br.to));
    const int f = br.from - 1, t = br.to - 1;
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> ysh(0.0, br.b_sh / 2.0);
    const double a = br.tap;
    Y(f, f) += (ys + ysh) / (a * a);
    Y(t, t) += ys + ysh;
    Y(f, t) += -ys / a;
    Y(t, f) += -ys / a;
  }
  for (int i = 0; i < n; ++i) Y(i, i) += std::complex<double>(0.0, c.buses[i].b_shunt);
  AdmittanceMatrix out;
  out.G = Y.real();
  out.B = Y.imag();
  return out;
}

/// Applies the case's renewable placement rule: flags the matched buses and
/// splits the configured totals uniformly over them. Buses outside the match
/// set are left untouched.
inline NetworkCase attach_renewables(NetworkCase c) {
  std::vector<int> matched;
  for (int i = 0; i < c.n_bus(); ++i) {
    const Bus& b = c.buses[i];
    const bool is_load = b.p_load != 0.0 || b.q_load != 0.0;
    if (!is_load) continue;
    if (c.renewable_rule.kind == RenewableRule::Kind::EveryLoadBus ||
        b.p_load >= c.renewable_rule.p_min)
      matched.push_back(i);
  }
  c.renewable_rule_applied = true;
  c.renewable_rule_matched_none = matched.empty();
  if (matched.empty()) return c;
  const double p_each = c.renewable_rule.p_total / static_cast<double>(matched.size());
  const double q_each = c.renewable_rule.q_total / static_cast<double>(matched.size());
  for (int i : matched) {
    c.buses[i].has_renewable = true;
    c.buses[i].p_ren = p_each;
    c.buses[i].q_ren = q_each;
  }
  return c;
}

}  // namespace gridctl
