// qboltz_cli: runs one experiment, writes its resolved config and CSV/JSON outputs to --out.
// Exit codes: 0 success, 1 failed check, 2 configuration error.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "oracles.hpp"
#include "qboltz/harness.hpp"

using namespace qboltz;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::optional<std::string> out;
  std::optional<int> theta, nv, threads, samples;
  std::optional<double> rho;
  std::optional<long> seed;
};

struct Outcome {
  Json report;
  bool passed = true;
};

std::vector<double> random_field(const VelocityGrid& g, int theta, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const double t0 = 0.7 + 0.6 * ud(rng), t1 = 0.7 + 0.6 * ud(rng), t2 = 0.7 + 0.6 * ud(rng);
  const double peak = theta == -1 ? 0.05 + 0.9 * ud(rng) : 0.2 + 1.5 * ud(rng);
  return g.sample([&](const Vec3& v) {
    const double e = v[0] * v[0] / t0 + v[1] * v[1] / t1 + v[2] * v[2] / t2;
    double f = peak * std::exp(-e) * (1.0 + 0.6 * (2.0 * ud(rng) - 1.0));
    if (theta == -1) f = std::min(f, 0.97);
    return std::max(f, 1e-300);
  });
}

std::vector<double> two_bump(const VelocityGrid& g, int theta) {
  const double peak = theta == -1 ? 0.6 : 0.8;
  return g.sample([&](const Vec3& v) {
    const double a = std::exp(-((v[0] - 1.0) * (v[0] - 1.0) + v[1] * v[1] / 0.7 + v[2] * v[2]));
    const double b = std::exp(-((v[0] + 1.0) * (v[0] + 1.0) / 0.8 + v[1] * v[1] + v[2] * v[2] / 0.6));
    return peak * (a + b) / (1.0 + (theta == -1 ? 0.8 * (a + b) : 0.0));
  });
}

Outcome verify_operator(const RunConfig& cfg) {
  const int theta = int(cfg.integer("eq.theta"));
  const VelocityGrid g = cfg.velocity_grid();
  CollisionGeometry geom(g, int(cfg.integer("quad.n_polar")), int(cfg.integer("quad.n_azimuth")));
  std::mt19937_64 rng(std::uint64_t(cfg.integer("seed")));
  const long n = cfg.integer("solver.samples");
  const auto weights = weak_form_invariants_weights(geom);
  double oracle_err = 0.0, weak_err = 0.0, min_dissipation = INFINITY;
  for (long s = 0; s < n; ++s) {
    DistributionField F(random_field(g, theta, rng), theta, true);
    if (s == 0) {
      const auto fast = collide(F, geom);
      const auto ref = oracle::naive_collide(F.values, g, geom.sphere, theta);
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < fast.size(); ++k) {
        num = std::max(num, std::abs(fast[k] - ref[k]));
        den = std::max(den, std::abs(ref[k]));
      }
      oracle_err = num / den;
    }
    const auto w = weak_form_invariants(F, geom);
    const auto sc = weak_form_invariants_scale(weights, theta, *std::max_element(F.values.begin(), F.values.end()));
    for (int j = 0; j < 5; ++j) weak_err = std::max(weak_err, std::abs(w[std::size_t(j)]) / sc[std::size_t(j)]);
    min_dissipation = std::min(min_dissipation, entropy_dissipation(F, geom));
  }
  Outcome o;
  o.passed = oracle_err <= 1e-13 && weak_err <= 1e-10 && min_dissipation >= 0.0;
  o.report = {{"theta", theta},
              {"nv", g.n},
              {"samples", n},
              {"oracle_relative_error", oracle_err},
              {"max_weak_form_ratio", weak_err},
              {"min_entropy_dissipation", min_dissipation},
              {"passed", o.passed}};
  return o;
}

Outcome spectrum_run(const RunConfig& cfg) {
  const auto p = cfg.equilibrium();
  CollisionGeometry geom(cfg.velocity_grid(), 4, 8);
  LinearizedOperator op = build_linearized_operator(p, geom);
  const SpectrumReport r = spectrum(op);
  Outcome o;
  o.passed = r.null_count == 5 && r.delta > 0.0;
  o.report = to_json(r, p, geom.grid.n);
  o.report["passed"] = o.passed;
  return o;
}

Outcome relax_run(const RunConfig& cfg, const fs::path& out) {
  const int theta = int(cfg.integer("eq.theta"));
  const VelocityGrid g = cfg.velocity_grid();
  RelaxOptions ro;
  ro.dt = cfg.real("solver.dt");
  ro.t_end = cfg.real("solver.t_end");
  ro.n_polar = int(cfg.integer("quad.n_polar"));
  ro.n_azimuth = int(cfg.integer("quad.n_azimuth"));
  ro.pair_energy_cutoff = cfg.real("solver.pair_energy_cutoff");
  const RelaxResult r = relax_homogeneous(DistributionField(two_bump(g, theta), theta), g, ro);
  write_trajectory_csv((out / "trajectory.csv").string(), r.rows);
  Outcome o;
  o.passed = r.moment_drift <= 1e-7 && r.max_entropy_drop <= 1e-8;
  o.report = {{"theta", theta},
              {"nv", g.n},
              {"steps", r.steps},
              {"final_l2_error", r.final_l2_error},
              {"moment_drift", r.moment_drift},
              {"max_entropy_drop", r.max_entropy_drop},
              {"equilibrium", {{"a", r.equilibrium.a}, {"b", r.equilibrium.b}, {"c", r.equilibrium.c}}},
              {"passed", o.passed}};
  return o;
}

Outcome decay_run(const RunConfig& cfg, const fs::path& out) {
  const auto p = cfg.equilibrium();
  const SpatialGrid sp(int(cfg.integer("space.dim")), int(cfg.integer("space.nx")), cfg.real("space.period"));
  PerturbationSolver solver(p, sp, CollisionGeometry(cfg.velocity_grid(), 4, 8));
  const auto& g = solver.velocity();
  const std::size_t Nv = g.size();
  std::mt19937_64 rng(std::uint64_t(cfg.integer("seed")));
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  const EquilibriumTables tab(p, g);
  const double eps = cfg.real("solver.eps"), c[4] = {ud(rng), ud(rng), ud(rng), ud(rng)};
  std::vector<double> f(sp.cells() * Nv);
  for (std::size_t cell = 0; cell < sp.cells(); ++cell) {
    const double x = 2.0 * std::numbers::pi * double(cell % std::size_t(sp.n)) / sp.n;
    for (std::size_t n = 0; n < Nv; ++n) {
      const Vec3 v = g.point(n);
      f[cell * Nv + n] = eps * tab.sqrtM[n] * (std::sin(x) * (c[0] + c[1] * v[0] + c[2] * norm2(v)) + c[3] * std::cos(2.0 * x) * v[0]);
    }
  }
  const TorusRun run = run_torus(solver, TorusState{f, 0.0}, cfg.real("solver.dt"), cfg.real("solver.t_end"));
  std::vector<TrajectoryRow> rows;
  std::vector<double> t, l2;
  for (std::size_t k = 0; k < run.records.size(); ++k) {
    const auto& r = run.records[k];
    TrajectoryRow row;
    row.t = r.t;
    row.mass = r.moments[0];
    row.momentum = {r.moments[1], r.moments[2], r.moments[3]};
    row.energy = r.moments[4];
    for (std::size_t cell = 0; cell < sp.cells(); ++cell) {
      std::vector<double> fc(run.snapshots[k].f.begin() + std::ptrdiff_t(cell * Nv),
                             run.snapshots[k].f.begin() + std::ptrdiff_t((cell + 1) * Nv));
      row.entropy += entropy(DistributionField(reconstruct_F(fc, p, g), p.theta), g) / double(sp.cells());
    }
    row.l2_f = r.l2;
    row.nu_f = r.nu;
    row.sup_f = r.sup;
    rows.push_back(row);
    t.push_back(r.t);
    l2.push_back(r.l2);
  }
  write_trajectory_csv((out / "trajectory.csv").string(), rows);
  const DecayFit fit = measure_decay(t, l2);
  Outcome o;
  o.passed = !fit.degenerate && fit.k > 0.0 && fit.r2 >= 0.95;
  o.report = {{"theta", p.theta}, {"rho", p.rho()},  {"nv", g.n},          {"nx", sp.n},
              {"period", sp.period}, {"k", fit.k}, {"r2", fit.r2}, {"passed", o.passed}};
  return o;
}

Outcome vacuum_run(const RunConfig& cfg) {
  const VacuumContext ctx(cfg.vacuum(int(cfg.integer("eq.theta"))));
  const PicardReport r = picard_iteration(gaussian_vacuum_state(ctx, cfg.real("vacuum.amplitude")), ctx);
  Outcome o;
  o.passed = r.contracting && r.within_ball;
  o.report = to_json(r);
  o.report["bound_constants"] = to_json(measure_bound_constants(ctx, cfg.real("vacuum.amplitude")));
  o.report["passed"] = o.passed;
  if (!r.contracting) std::cerr << r.message << "\n";
  return o;
}

Outcome brackets_run(const RunConfig& cfg) {
  const int theta = int(cfg.integer("eq.theta"));
  if (theta == 0) throw ConfigError("brackets need eq.theta = 1 or -1");
  const VacuumContext ctx(cfg.vacuum(theta));
  const auto F0 = gaussian_vacuum_state(ctx, cfg.real("vacuum.amplitude"));
  const BracketReport r = bracket_iteration(F0, ctx);
  const PicardReport p = picard_iteration(F0, ctx);
  const double gap = weighted_distance(r.limit(), p.solution, ctx);
  Outcome o;
  o.passed = r.sandwich_ok && gap <= 1e-6;
  o.report = to_json(r);
  o.report["summary"]["picard_distance"] = gap;
  o.report["summary"]["passed"] = o.passed;
  if (!r.sandwich_ok) std::cerr << "sandwich violated: " << r.violation << "\n";
  return o;
}

Outcome dispersion_run(const RunConfig& cfg) {
  const DispersionReport r = dispersion_checks(int(cfg.integer("dispersion.samples")), std::uint64_t(cfg.integer("seed")));
  Outcome o;
  o.passed = r.identity_residual <= 1e-12 && r.corrected_holds;
  o.report = to_json(r);
  o.report["passed"] = o.passed;
  return o;
}

int run(const std::string& name, const Flags& fl) {
  RunConfig cfg;
  if (!fl.config.empty()) cfg.merge_file(fl.config);
  cfg.set("experiment", name);
  if (fl.out) cfg.set("out", *fl.out);
  if (fl.theta) cfg.set("eq.theta", std::to_string(*fl.theta));
  if (fl.rho) cfg.set("eq.rho", RunConfig::format(*fl.rho));
  if (fl.nv) cfg.set("grid.nv", std::to_string(*fl.nv));
  if (fl.seed) cfg.set("seed", std::to_string(*fl.seed));
  if (fl.threads) cfg.set("threads", std::to_string(*fl.threads));
  if (fl.samples) {
    cfg.set("dispersion.samples", std::to_string(*fl.samples));
    cfg.set("solver.samples", std::to_string(*fl.samples));
  }
#ifdef _OPENMP
  if (const long th = cfg.integer("threads"); th > 0) omp_set_num_threads(int(th));
#endif
  const fs::path out = cfg.text("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory '" + out.string() + "'");
  cfg.write((out / (name + ".config")).string());

  Outcome o;
  if (name == "verify-operator") o = verify_operator(cfg);
  else if (name == "spectrum") o = spectrum_run(cfg);
  else if (name == "relax") o = relax_run(cfg, out);
  else if (name == "decay") o = decay_run(cfg, out);
  else if (name == "vacuum") o = vacuum_run(cfg);
  else if (name == "brackets") o = brackets_run(cfg);
  else o = dispersion_run(cfg);
  write_json(o.report, (out / (name + ".json")).string());
  std::cout << o.report.dump(2) << "\n";
  return o.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantum Boltzmann numerical laboratory"};
  app.require_subcommand(1);
  Flags fl;
  const std::pair<const char*, const char*> commands[] = {
      {"verify-operator", "compare collide with the naive reference and check the invariant weak forms"},
      {"spectrum", "assemble the linearized operator and report eigenvalues and the gap"},
      {"relax", "homogeneous relaxation toward the fitted equilibrium"},
      {"decay", "small perturbation on the periodic box and the fitted decay rate"},
      {"vacuum", "Picard iteration for the near-vacuum problem"},
      {"brackets", "upper and lower bracket iteration for the near-vacuum problem"},
      {"dispersion", "random checks of the dispersion identity and time-integral bound"},
  };
  for (const auto& [name, about] : commands) {
    CLI::App* sub = app.add_subcommand(name, about);
    sub->add_option("--config", fl.config, "flat key = value config file");
    sub->add_option("--out", fl.out, "output directory");
    sub->add_option("--theta", fl.theta, "statistics: -1 fermion, 0 classical, 1 boson")->check(CLI::Range(-1, 1));
    sub->add_option("--rho", fl.rho, "equilibrium fugacity parameter");
    sub->add_option("--nv", fl.nv, "velocity points per axis");
    sub->add_option("--seed", fl.seed, "random seed");
    sub->add_option("--threads", fl.threads, "OpenMP threads (0 keeps the default)");
    sub->add_option("--samples", fl.samples, "random samples");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    return run(app.get_subcommands().front()->get_name(), fl);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
