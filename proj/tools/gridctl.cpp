// gridctl: power-network NDAE modeling, gain synthesis and disturbance
// scenarios from the command line.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gridctl/baselines.hpp"
#include "gridctl/netcase.hpp"
#include "gridctl/powerflow.hpp"
#include "gridctl/scenario.hpp"
#include "gridctl/synth.hpp"

namespace fs = std::filesystem;
using namespace gridctl;

namespace {

std::string resolve_case(const std::string& spec, const std::string& data_dir) {
  if (fs::exists(spec)) return spec;
  const fs::path p = fs::path(data_dir) / (spec + ".json");
  if (fs::exists(p)) return p.string();
  throw std::runtime_error("case '" + spec + "' not found (looked for file and " + p.string() +
                           ")");
}

std::vector<std::string> state_names(const StateIndexing& ix) {
  std::vector<std::string> names;
  for (int j = 0; j < ix.n_d; ++j) names.push_back(state_name(ix, j));
  return names;
}

int cmd_case_validate(const std::string& path) {
  const NetworkCase c = load_case(path);
  std::cout << c.name << ": " << c.n_bus() << " buses, " << c.branches.size()
            << " branches, " << c.n_gen() << " generators -- valid\n";
  return 0;
}

int cmd_case_ybus(const std::string& path, const std::string& out) {
  const NetworkCase c = load_case(path);
  const AdmittanceMatrix y = build_admittance(c);
  MatrixXd both(y.G.rows(), 2 * y.G.cols());
  both << y.G, y.B;
  write_matrix_csv(out, both);
  std::cout << "wrote G|B (" << y.G.rows() << "x" << 2 * y.G.cols() << ") to " << out << "\n";
  return 0;
}

int cmd_pf(const std::string& path, double tol, const std::string& out) {
  const NetworkCase c = attach_renewables(load_case(path));
  const AdmittanceMatrix y = build_admittance(c);
  const PfSolution pf = solve_power_flow(c, y, tol);
  std::cout << "converged in " << pf.iterations << " iterations, residual "
            << pf.residual_norm << "\n";
  if (!out.empty()) {
    MatrixXd M(c.n_bus(), 4);
    M.col(0) = pf.v;
    M.col(1) = pf.theta;
    M.col(2) = pf.p_inj;
    M.col(3) = pf.q_inj;
    write_matrix_csv(out, M, {"v", "theta", "p_inj", "q_inj"});
    std::cout << "wrote " << out << "\n";
  } else {
    for (int i = 0; i < c.n_bus(); ++i)
      std::cout << "bus " << i + 1 << ": v=" << pf.v(i) << " theta=" << pf.theta(i)
                << " p=" << pf.p_inj(i) << " q=" << pf.q_inj(i) << "\n";
  }
  return 0;
}

int cmd_model_dump(const std::string& path, const std::string& out_dir, double sigma) {
  const NetworkCase c = attach_renewables(load_case(path));
  const AdmittanceMatrix y = build_admittance(c);
  NdaeOptions mo;
  mo.channel_scale = sigma;
  const NdaeModel m = assemble_model(c, y, mo);
  fs::create_directories(out_dir);
  write_matrix_csv((fs::path(out_dir) / "A_d.csv").string(), m.A_d);
  write_matrix_csv((fs::path(out_dir) / "G_d.csv").string(), m.G_d);
  write_matrix_csv((fs::path(out_dir) / "B_d.csv").string(), m.B_d);
  write_matrix_csv((fs::path(out_dir) / "h.csv").string(), m.h);
  write_matrix_csv((fs::path(out_dir) / "A_a.csv").string(), m.A_a);
  write_matrix_csv((fs::path(out_dir) / "G_a.csv").string(), m.G_a);
  write_matrix_csv((fs::path(out_dir) / "B_a.csv").string(), m.B_a);
  std::cout << "wrote model matrices to " << out_dir << " (n_d=" << m.n_d()
            << " n_a=" << m.n_a() << " n_u=" << m.n_u() << " n_q=" << m.n_q() << ")\n";
  return 0;
}

int cmd_equilibrium(const std::string& path, double load_scale, const std::string& out) {
  NetworkCase c = attach_renewables(load_case(path));
  for (Bus& b : c.buses) {
    b.p_load *= load_scale;
    b.q_load *= load_scale;
  }
  const AdmittanceMatrix y = build_admittance(c);
  const NdaeModel m = assemble_model(c, y);
  const PfSolution pf = solve_power_flow(c, y, 1e-10);
  const OperatingPoint op = steady_state(m, pf, m.scheduled_q());
  std::cout << "operating point residual " << op.residual_norm << "\n";
  if (!out.empty()) {
    MatrixXd M(m.n_d(), 1);
    M.col(0) = op.x_d_k;
    write_matrix_csv(out, M, {"x_d"}, state_names(m.idx));
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

int cmd_synth(const std::string& path, double hd, double ha, double kappa, double sigma,
              const std::string& out) {
  ScenarioConfig cfg;
  cfg.case_path = path;
  {
    const NetworkCase probe = load_case(path);
    defaults_for(probe.name, cfg);
  }
  cfg.hd_sq = hd;
  cfg.ha_sq = ha;
  cfg.kappa = kappa;
  if (sigma > 0) cfg.channel_scale = sigma;
  CaseContext ctx = prepare_case(cfg);
  const MatrixXd& K = ndae_gain(ctx, cfg);
  std::cout << "synthesis: " << ctx.synth.status << ", reassembled lambda_max "
            << ctx.synth.lmi_lambda_max << ", |W|_2 " << ctx.synth.objective / cfg.kappa
            << ", gain scale " << ctx.synth.gain_scale
            << (ctx.synth.reduced ? " (reduced parameterization)" : "") << "\n";
  const SparsityReport sr = sparsity_report(ctx.model.idx, K);
  std::cout << "gain sparsity: " << sr.significant.size() << " significant entries, "
            << (sr.conforming ? "decentralized pattern" : "NON-decentralized pattern")
            << ", max off-pattern " << sr.max_off_pattern << "\n";
  if (!out.empty()) {
    std::vector<std::string> rows;
    for (int i = 0; i < K.rows(); ++i) rows.push_back(input_name(ctx.model.idx, i));
    write_matrix_csv(out, K, state_names(ctx.model.idx), rows);
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

int cmd_run(const std::string& path, const std::string& controller, double rho_l,
            bool noise, int runs, unsigned seed, double horizon, double dt,
            const std::string& out_dir) {
  ScenarioConfig cfg;
  cfg.case_path = path;
  {
    const NetworkCase probe = load_case(path);
    defaults_for(probe.name, cfg);
  }
  cfg.controller = controller;
  cfg.rho_l = rho_l;
  cfg.noise = noise;
  cfg.runs = runs;
  cfg.seed = seed;
  if (horizon > 0) cfg.horizon = horizon;
  if (cfg.t_metric > cfg.horizon) cfg.t_metric = cfg.horizon;
  if (dt > 0) cfg.dt = dt;
  CaseContext ctx = prepare_case(cfg);

  nlohmann::json rep_json;
  rep_json["case"] = ctx.net.name;
  rep_json["controller"] = controller;
  rep_json["rho_l"] = rho_l;
  rep_json["rho_r"] = -rho_l;

  ScenarioReport rep;
  if (noise) {
    cfg.noise = true;
    std::vector<unsigned> seeds;
    for (int r = 0; r < runs; ++r) seeds.push_back(seed + static_cast<unsigned>(r));
    rep = noise_scenario(ctx, cfg, seeds);
    rep_json["runs"] = runs;
    rep_json["envelope_min_rad_s"] = rep.env_min;
    rep_json["envelope_max_rad_s"] = rep.env_max;
  } else {
    rep = run_scenario(ctx, cfg);
  }
  if (rep.converged) {
    rep_json["deviation_metric"] = rep.deviation_metric;
    std::cout << "converged: metric " << rep.deviation_metric << " at t=" << cfg.t_metric
              << " s\n";
  } else {
    rep_json["deviation_metric"] = "diverged";
    rep_json["detail"] = rep.verdict_detail;
    std::cout << "diverged: " << rep.verdict_detail << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream jf(fs::path(out_dir) / "report.json");
    jf << rep_json.dump(2) << "\n";
    if (rep.trajectory.steps() > 0)
      write_trajectory_csv((fs::path(out_dir) / "trajectory.csv").string(), ctx.model,
                           rep.trajectory);
    std::cout << "wrote report to " << out_dir << "\n";
  }
  return rep.converged ? 0 : 2;
}

int cmd_table2(const std::string& data_dir, const std::string& out,
               const std::vector<std::string>& only_cases) {
  struct Row {
    std::string case_id;
    std::vector<double> rhos;
  };
  const std::vector<Row> rows = {{"ieee9", {0.04, 0.08, 0.12}},
                                 {"ieee14", {0.04, 0.08, 0.12}},
                                 {"ieee39", {0.01, 0.05}},
                                 {"ieee57", {0.005, 0.01}}};
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << "case,rho_l,ndae,lqr,agc\n";
  for (const Row& row : rows) {
    if (!only_cases.empty() &&
        std::find(only_cases.begin(), only_cases.end(), row.case_id) == only_cases.end())
      continue;
    ScenarioConfig cfg;
    cfg.case_path = resolve_case(row.case_id, data_dir);
    defaults_for(row.case_id, cfg);
    CaseContext ctx = prepare_case(cfg);
    for (double rho : row.rhos) {
      f << row.case_id << "," << rho;
      for (const std::string& ctl : {"ndae", "lqr", "agc"}) {
        ScenarioConfig c2 = cfg;
        c2.controller = ctl;
        c2.rho_l = rho;
        try {
          const ScenarioReport rep = run_scenario(ctx, c2);
          if (rep.converged)
            f << "," << rep.deviation_metric;
          else
            f << ",-";
          std::cout << row.case_id << " rho=" << rho << " " << ctl << ": "
                    << (rep.converged ? std::to_string(rep.deviation_metric) : "-") << "\n";
        } catch (const std::exception& e) {
          f << ",-";
          std::cout << row.case_id << " rho=" << rho << " " << ctl << ": - (" << e.what()
                    << ")\n";
        }
        f.flush();
      }
      f << "\n";
    }
  }
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"power-network NDAE control toolkit"};
  app.require_subcommand(1);
  std::string data_dir = "data";
  app.add_option("--data-dir", data_dir, "directory with case fixtures");

  // case validate / ybus
  auto* sc_case = app.add_subcommand("case", "case file utilities");
  sc_case->require_subcommand(1);
  std::string case_path, out_path;
  auto* sc_val = sc_case->add_subcommand("validate", "parse and validate a case file");
  sc_val->add_option("path", case_path)->required();
  auto* sc_ybus = sc_case->add_subcommand("ybus", "write the bus admittance matrix");
  sc_ybus->add_option("path", case_path)->required();
  sc_ybus->add_option("--out", out_path, "output CSV (G columns then B columns)")->required();

  std::string pf_case, pf_out;
  double pf_tol = 1e-8;
  auto* sc_pf = app.add_subcommand("pf", "solve the AC power flow");
  sc_pf->add_option("case", pf_case)->required();
  sc_pf->add_option("--tol", pf_tol);
  sc_pf->add_option("--out", pf_out);

  std::string md_case, md_out;
  double md_sigma = 0.02;
  auto* sc_md = app.add_subcommand("model", "model utilities");
  sc_md->require_subcommand(1);
  auto* sc_dump = sc_md->add_subcommand("dump", "write the assembled constant matrices");
  sc_dump->add_option("case", md_case)->required();
  sc_dump->add_option("--out", md_out)->required();
  sc_dump->add_option("--sigma", md_sigma, "nonlinearity channel scale");

  std::string eq_case, eq_out;
  double eq_scale = 1.0;
  auto* sc_eq = app.add_subcommand("equilibrium", "compute the scheduled operating point");
  sc_eq->add_option("case", eq_case)->required();
  sc_eq->add_option("--load-scale", eq_scale);
  sc_eq->add_option("--out", eq_out);

  std::string sy_case, sy_out;
  double sy_hd = 1.0, sy_ha = 1.0, sy_kappa = 1e-3, sy_sigma = -1.0;
  auto* sc_sy = app.add_subcommand("synth", "synthesize the decentralized gain");
  sc_sy->add_option("case", sy_case)->required();
  sc_sy->add_option("--hd", sy_hd, "(H_d)^2 scale");
  sc_sy->add_option("--ha", sy_ha, "(H_a)^2 scale");
  sc_sy->add_option("--kappa", sy_kappa);
  sc_sy->add_option("--sigma", sy_sigma, "nonlinearity channel scale override");
  sc_sy->add_option("--out", sy_out, "gain CSV");

  std::string run_case, run_ctl = "ndae", run_out;
  double run_rho = 0.04, run_horizon = -1, run_dt = -1;
  bool run_noise = false;
  int run_runs = 10;
  unsigned run_seed = 1;
  auto* sc_run = app.add_subcommand("run", "run a disturbance scenario");
  sc_run->add_option("--case", run_case)->required();
  sc_run->add_option("--controller", run_ctl)
      ->check(CLI::IsMember({"ndae", "lqr", "agc", "open-loop"}));
  sc_run->add_option("--rho-l", run_rho);
  sc_run->add_flag("--noise", run_noise, "gaussian renewable noise, averaged runs");
  sc_run->add_option("--runs", run_runs);
  sc_run->add_option("--seed", run_seed);
  sc_run->add_option("--horizon", run_horizon);
  sc_run->add_option("--dt", run_dt);
  sc_run->add_option("--out", run_out, "report directory");

  std::string t2_out = "table2.csv";
  std::vector<std::string> t2_cases;
  auto* sc_t2 = app.add_subcommand("table2", "sweep the disturbance/controller grid");
  sc_t2->add_option("--out", t2_out);
  sc_t2->add_option("--cases", t2_cases, "subset of case ids");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sc_val->parsed()) return cmd_case_validate(resolve_case(case_path, data_dir));
    if (sc_ybus->parsed())
      return cmd_case_ybus(resolve_case(case_path, data_dir), out_path);
    if (sc_pf->parsed()) return cmd_pf(resolve_case(pf_case, data_dir), pf_tol, pf_out);
    if (sc_dump->parsed())
      return cmd_model_dump(resolve_case(md_case, data_dir), md_out, md_sigma);
    if (sc_eq->parsed())
      return cmd_equilibrium(resolve_case(eq_case, data_dir), eq_scale, eq_out);
    if (sc_sy->parsed())
      return cmd_synth(resolve_case(sy_case, data_dir), sy_hd, sy_ha, sy_kappa, sy_sigma,
                       sy_out);
    if (sc_run->parsed())
      return cmd_run(resolve_case(run_case, data_dir), run_ctl, run_rho, run_noise, run_runs,
                     run_seed, run_horizon, run_dt, run_out);
    if (sc_t2->parsed()) return cmd_table2(data_dir, t2_out, t2_cases);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
