// qrproc: quantile regression process estimation, bootstrap and inference.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "qrp/cli.hpp"

namespace {

struct Flags {
  std::string engine = "auto";
  std::string scheme = "gaussian";
  double start_tau = -1.0;
  double tau = -1.0;
  std::string process_out;
};

void common(CLI::App* app, qrp::RunConfig& cfg) {
  app->add_option("--seed", cfg.seed, "Base RNG seed");
  app->add_option("--workers", cfg.workers, "Worker threads (default: QRPROC_WORKERS or 1)");
  app->add_option("--output,-o", cfg.output, "Output path (default: stdout where possible)");
}

void data(CLI::App* app, qrp::RunConfig& cfg, Flags& f) {
  app->add_option("--input,-i", cfg.input, "CSV file with a header row")->required();
  app->add_option("--response,-y", cfg.response, "Response column");
  app->add_flag("!--no-intercept", cfg.intercept, "Do not prepend an intercept column");
  app->add_option("--engine", f.engine, "auto, full, preprocess or onestep");
  app->add_option("--alpha", cfg.alpha, "Level for bandwidths and tests");
  app->add_option("--start-tau", f.start_tau, "Starting quantile for the one-step march");
  app->add_flag("--ridge", cfg.ridge, "Regularise near-singular Jacobians");
  app->add_option("--format", cfg.format, "csv or json");
  app->add_option("--meta", cfg.meta, "Metadata JSON path for CSV output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantile regression process tools"};
  app.require_subcommand(1);
  qrp::RunConfig cfg;
  Flags f;

  auto* fit = app.add_subcommand("fit", "Single quantile regression");
  data(fit, cfg, f);
  common(fit, cfg);
  fit->add_option("--tau", f.tau, "Quantile index (default 0.5)");

  auto* process = app.add_subcommand("process", "Coefficient process over a grid");
  data(process, cfg, f);
  common(process, cfg);
  process->add_option("--taus", cfg.taus, "Grid: start:stop:step or a comma list");

  auto* boot = app.add_subcommand("bootstrap", "Bootstrap draws of the process");
  data(boot, cfg, f);
  common(boot, cfg);
  boot->add_option("--taus", cfg.taus, "Grid: start:stop:step or a comma list");
  boot->add_option("--method", cfg.bootstrap, "empirical, empirical-onestep, score or naive");
  boot->add_option("--scheme", f.scheme, "Score multipliers: gaussian, wild, exponential, multinomial");
  boot->add_option("--B", cfg.B, "Replicates");
  boot->add_option("--process-out", f.process_out, "Also write the sample process (json or csv)");

  auto* test = app.add_subcommand("test", "Pointwise, KS or CvM test");
  common(test, cfg);
  test->add_option("--process", cfg.process_path, "Process file written by process or bootstrap")->required();
  test->add_option("--draws", cfg.draws_path, "QRBD draws for KS / CvM");
  test->add_option("--coefficient", cfg.coefficient, "Coefficient name or index")->required();
  test->add_option("--test", cfg.test, "pointwise, ks or cvm");
  test->add_option("--null", cfg.null_value, "Null value (constant over the grid)");
  test->add_option("--tau", f.tau, "Quantile for the pointwise test");
  test->add_option("--alpha", cfg.alpha, "Test level");

  auto* bands = app.add_subcommand("bands", "Uniform confidence bands");
  common(bands, cfg);
  bands->add_option("--process", cfg.process_path, "Process file")->required();
  bands->add_option("--draws", cfg.draws_path, "QRBD draws")->required();
  bands->add_option("--coefficients", cfg.coefficients, "Coefficients (default: all)");
  bands->add_option("--alpha", cfg.alpha, "1 - confidence level");
  bands->add_option("--format", cfg.format, "csv or json");

  auto* sim = app.add_subcommand("simulate", "Monte Carlo studies");
  common(sim, cfg);
  sim->add_option("--study", cfg.study, "accuracy, pointwise or functional");
  sim->add_option("--design", cfg.design, "hagemann, location-scale or location-scale-homoskedastic");
  sim->add_option("--n", cfg.n, "Sample size");
  sim->add_option("--k", cfg.k, "Regressors for the location-scale design");
  sim->add_option("--R", cfg.R, "Replications");
  sim->add_option("--taus", cfg.taus, "Grid for accuracy and functional studies");
  sim->add_option("--tau", f.tau, "Quantile for the pointwise study");
  sim->add_option("--start-tau", f.start_tau, "Starting quantile for the one-step march");
  sim->add_option("--coefficient", cfg.coefficient, "Tested coefficient for the pointwise study");
  sim->add_option("--methods", cfg.methods, "Inference methods");
  sim->add_option("--B", cfg.B, "Replicates for functional tests");
  sim->add_option("--B-empirical", cfg.B_empirical, "Empirical bootstrap replicates (pointwise)");
  sim->add_option("--B-score", cfg.B_score, "Score bootstrap replicates (pointwise)");
  sim->add_option("--scheme", f.scheme, "Multiplier scheme");
  sim->add_option("--false-null-shift", cfg.false_null_shift, "False null = truth + shift (pointwise)");
  sim->add_option("--alpha", cfg.alpha, "Test level");

  auto* bench = app.add_subcommand("bench", "Engine timings");
  common(bench, cfg);
  bench->add_option("--n", cfg.n, "Sample size");
  bench->add_option("--k", cfg.k, "Regressors");
  bench->add_option("--taus", cfg.taus, "Grid for the process panel");
  bench->add_option("--B", cfg.B, "Bootstrap replicates");
  bench->add_option("--repetitions", cfg.repetitions, "Timed runs per engine (median reported)");
  bench->add_option("--panels", cfg.panels, "Comma list of single, process, bootstrap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return qrp::kExitInput;
  }

  try {
    cfg.engine = qrp::engine_choice_from_string(f.engine);
    cfg.scheme = qrp::scheme_from_string(f.scheme);
  } catch (const qrp::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return qrp::kExitInput;
  }
  if (f.start_tau >= 0.0) cfg.start_tau = f.start_tau;
  if (f.tau >= 0.0) cfg.tau = f.tau;

  if (*fit) return qrp::cmd_fit(cfg);
  if (*process) return qrp::cmd_process(cfg);
  if (*boot) return qrp::cmd_bootstrap(cfg, f.process_out);
  if (*test) return qrp::cmd_test(cfg);
  if (*bands) return qrp::cmd_bands(cfg);
  if (*sim) return qrp::cmd_simulate(cfg);
  if (*bench) return qrp::cmd_bench(cfg);
  return qrp::kExitInternal;
}
