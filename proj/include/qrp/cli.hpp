#pragma once

#include <chrono>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qrp/bootstrap.hpp"
#include "qrp/core_model.hpp"
#include "qrp/errors.hpp"
#include "qrp/inference.hpp"
#include "qrp/io.hpp"
#include "qrp/onestep.hpp"
#include "qrp/preprocess.hpp"
#include "qrp/simulate.hpp"
#include "qrp/solver.hpp"

namespace qrp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitInternal = 4;

/// engine=auto switches to the one-step estimator once J * n * k exceeds
/// this many units of work (about n = 10000 with k = 20 and 99 quantiles).
inline constexpr double kAutoOnestepWork = 2e7;

enum class EngineChoice { auto_select, full, preprocess, onestep };

inline EngineChoice engine_choice_from_string(std::string_view s) {
  if (s == "auto") return EngineChoice::auto_select;
  if (s == "full") return EngineChoice::full;
  if (s == "preprocess") return EngineChoice::preprocess;
  if (s == "onestep") return EngineChoice::onestep;
  throw ValidationError("unknown engine '" + std::string(s) + "'");
}

inline std::string to_string(EngineChoice e) {
  switch (e) {
    case EngineChoice::auto_select: return "auto";
    case EngineChoice::full: return "full";
    case EngineChoice::preprocess: return "preprocess";
    case EngineChoice::onestep: return "onestep";
  }
  return "auto";
}

inline EngineChoice resolve_engine(EngineChoice e, std::size_t J, Index n, Index k) {
  if (e != EngineChoice::auto_select) return e;
  const double work = static_cast<double>(J) * static_cast<double>(n) * static_cast<double>(k);
  return work > kAutoOnestepWork ? EngineChoice::onestep : EngineChoice::preprocess;
}

struct RunConfig {
  std::string input;
  std::string response = "y";
  bool intercept = true;
  std::string taus = "0.05:0.95:0.01";
  EngineChoice engine = EngineChoice::auto_select;
  std::string bootstrap = "none";  // none, empirical, empirical-onestep, score, naive
  WeightScheme scheme = WeightScheme::gaussian;
  Index B = 100;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  int workers = 0;
  std::optional<double> start_tau;
  bool ridge = false;
  std::string output;  // empty: stdout
  std::string format = "csv";
  std::string meta;    // metadata JSON for CSV outputs; empty: <output>.meta.json

  // test / bands
  std::string process_path;
  std::string draws_path;
  std::string coefficient;   // name or index
  std::string test = "ks";   // pointwise, ks, cvm
  double null_value = 0.0;
  std::optional<double> tau;  // pointwise test or fit
  std::vector<std::string> coefficients;

  // simulate / bench
  std::string study = "accuracy";  // accuracy, pointwise, functional
  std::string design = "hagemann";
  Index n = 1000;
  Index k = 20;
  Index R = 200;
  std::vector<std::string> methods;
  Index B_empirical = 100;
  Index B_score = 250;
  double false_null_shift = 0.4;
  int repetitions = 3;
  std::string panels = "single,process,bootstrap";

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("--alpha must lie in (0,1)");
    if (B < 1) throw ValidationError("--B must be at least 1");
    if (format != "csv" && format != "json") throw ValidationError("--format must be csv or json");
    if (workers < 0) throw ValidationError("--workers must be nonnegative");
  }
};

namespace detail {

inline void emit(const RunConfig& cfg, const std::string& text) {
  if (cfg.output.empty())
    std::cout << text;
  else
    write_text(cfg.output, text);
}

inline Json run_meta(const RunConfig& cfg, const std::string& command) {
  Json m;
  m["command"] = command;
  m["input"] = cfg.input;
  m["response"] = cfg.response;
  m["seed"] = cfg.seed;
  m["workers"] = resolve_workers(cfg.workers);
  m["version"] = "0.1.0";
  return m;
}

inline Index coefficient_index(const std::string& spec, const std::vector<std::string>& names, Index k) {
  if (spec.empty()) throw ValidationError("--coefficient is required");
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c] == spec) return static_cast<Index>(c);
  Index idx = -1;
  const auto [p, ec] = std::from_chars(spec.data(), spec.data() + spec.size(), idx);
  if (ec != std::errc() || p != spec.data() + spec.size() || idx < 0 || idx >= k)
    throw ValidationError("unknown coefficient '" + spec + "'");
  return idx;
}

inline CoefProcess fit_with_engine(const Dataset& ds, const QuantileGrid& grid, EngineChoice engine,
                                   const RunConfig& cfg) {
  OnestepConfig oc;
  oc.alpha = cfg.alpha;
  oc.ridge = cfg.ridge;
  switch (resolve_engine(engine, grid.size(), ds.n(), ds.k())) {
    case EngineChoice::full: return fit_process_full(ds, grid);
    case EngineChoice::onestep: return fit_process_onestep(ds, grid, cfg.start_tau, {}, oc);
    default: return fit_process_preprocess(ds, grid);
  }
}

inline BootstrapConfig bootstrap_config(const RunConfig& cfg) {
  BootstrapConfig bc;
  bc.B = cfg.B;
  bc.seed = cfg.seed;
  bc.workers = cfg.workers;
  bc.scheme = cfg.scheme;
  bc.onestep.alpha = cfg.alpha;
  bc.onestep.ridge = cfg.ridge;
  return bc;
}

inline void write_process(const RunConfig& cfg, const ProcessFile& pf) {
  if (cfg.format == "json") {
    emit(cfg, to_json(pf).dump(2) + "\n");
    return;
  }
  if (cfg.output.empty()) throw ValidationError("CSV process output needs --output");
  write_process_csv(pf, cfg.output);
  const std::string meta = cfg.meta.empty() ? cfg.output + ".meta.json" : cfg.meta;
  Json m = pf.meta;
  m["n"] = pf.n;
  m["k"] = pf.proc.k();
  m["coefficients"] = pf.names;
  m["grid"] = pf.proc.grid.taus();
  write_text(meta, m.dump(2) + "\n");
}

inline ProcessFile make_process_file(const Dataset& ds, CoefProcess proc, const RunConfig& cfg,
                                     const std::string& command, double seconds) {
  ProcessFile pf;
  try {
    attach_jacobians(ds, proc, cfg.alpha);
    pf.se = process_standard_errors(ds, proc);
  } catch (const NumericalError& e) {
    std::cerr << "warning: standard errors unavailable: " << e.what() << "\n";
  }
  pf.proc = std::move(proc);
  pf.names = ds.column_names();
  pf.n = ds.n();
  pf.meta = run_meta(cfg, command);
  pf.meta["engine"] = to_string(pf.proc.fits.empty() ? Engine::baseline : pf.proc.fits.front().engine);
  pf.meta["seconds"] = seconds;
  int fixups = 0, restarts = 0, fell_back = 0;
  for (const auto& f : pf.proc.fits) {
    fixups += f.fixups;
    restarts += f.restarts;
    fell_back += f.fell_back ? 1 : 0;
  }
  pf.meta["fixups"] = fixups;
  pf.meta["restarts"] = restarts;
  pf.meta["fell_back"] = fell_back;
  return pf;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void print_warnings(const QuantileGrid& grid, const Dataset& ds) {
  for (const auto& w : validate_grid(grid, ds.n(), ds.k())) std::cerr << "warning: " << w.message << "\n";
}

template <class F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const SingularJacobianError& e) {
    std::cerr << "error: " << e.what() << " (retry with --ridge or --engine preprocess)\n";
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace detail

/// Single quantile fit.
inline int cmd_fit(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    const Dataset ds = load_csv(cfg.input, cfg.response, cfg.intercept);
    const double tau = cfg.tau.value_or(0.5);
    const QuantileGrid grid({tau});
    detail::print_warnings(grid, ds);
    const auto t0 = std::chrono::steady_clock::now();
    CoefProcess proc;
    proc.grid = grid;
    switch (cfg.engine) {
      case EngineChoice::full: proc.fits.push_back(solve_qr(ds, tau)); break;
      case EngineChoice::onestep: throw ValidationError("fit supports --engine full or preprocess");
      default: proc.fits.push_back(fit_single_pk(ds, tau)); break;
    }
    detail::write_process(cfg, detail::make_process_file(ds, std::move(proc), cfg, "fit", detail::seconds_since(t0)));
    return kExitOk;
  });
}

/// Coefficient process over a grid.
inline int cmd_process(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    const Dataset ds = load_csv(cfg.input, cfg.response, cfg.intercept);
    const QuantileGrid grid = QuantileGrid::parse(cfg.taus);
    detail::print_warnings(grid, ds);
    const auto t0 = std::chrono::steady_clock::now();
    CoefProcess proc = detail::fit_with_engine(ds, grid, cfg.engine, cfg);
    auto pf = detail::make_process_file(ds, std::move(proc), cfg, "process", detail::seconds_since(t0));
    pf.meta["engine_requested"] = to_string(cfg.engine);
    detail::write_process(cfg, pf);
    return kExitOk;
  });
}

/// Bootstrap draws of the process; writes QRBD (or CSV by extension) and,
/// with --process-out, the sample process the draws are centred on.
inline int cmd_bootstrap(const RunConfig& cfg, const std::string& process_out = "") {
  return detail::guarded([&] {
    cfg.validate();
    if (cfg.output.empty()) throw ValidationError("bootstrap needs --output");
    const Dataset ds = load_csv(cfg.input, cfg.response, cfg.intercept);
    const QuantileGrid grid = QuantileGrid::parse(cfg.taus);
    detail::print_warnings(grid, ds);
    const auto t0 = std::chrono::steady_clock::now();
    const BootstrapConfig bc = detail::bootstrap_config(cfg);
    const std::string method = cfg.bootstrap == "none" ? "empirical" : cfg.bootstrap;
    EngineChoice engine = cfg.engine;
    if (method == "empirical-onestep") engine = EngineChoice::onestep;
    if (method == "empirical" && engine == EngineChoice::auto_select) engine = EngineChoice::preprocess;
    CoefProcess proc = detail::fit_with_engine(ds, grid, engine, cfg);
    BootstrapDraws draws;
    if (method == "empirical")
      draws = bootstrap_qr_preprocessed(ds, proc, bc);
    else if (method == "empirical-onestep")
      draws = bootstrap_onestep(ds, proc, bc, cfg.start_tau);
    else if (method == "naive")
      draws = bootstrap_qr_naive(ds, grid, bc);
    else if (method == "score") {
      attach_jacobians(ds, proc, cfg.alpha);
      draws = score_multiplier_bootstrap(ds, proc, bc);
    } else
      throw ValidationError("unknown bootstrap method '" + method + "'");
    write_draws(draws, cfg.output);
    if (draws.failed() > 0)
      std::cerr << "warning: " << draws.failed() << " of " << draws.requested << " replicates failed and were dropped\n";
    if (!process_out.empty()) {
      RunConfig pc = cfg;
      pc.output = process_out;
      pc.format = has_suffix(process_out, ".csv") ? "csv" : "json";
      pc.meta.clear();
      auto pf = detail::make_process_file(ds, std::move(proc), cfg, "bootstrap", detail::seconds_since(t0));
      pf.meta["bootstrap"] = method;
      pf.meta["B"] = draws.B;
      pf.meta["failed"] = draws.failed();
      detail::write_process(pc, pf);
    }
    return kExitOk;
  });
}

/// Pointwise test from a stored process, or KS / CvM against stored draws.
inline int cmd_test(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    if (cfg.process_path.empty()) throw ValidationError("test needs --process");
    const ProcessFile pf = read_process(cfg.process_path);
    const Index c = detail::coefficient_index(cfg.coefficient, pf.names, pf.proc.k());
    if (pf.se.size() == 0) throw ValidationError("process file carries no standard errors");
    TestResult t;
    const TestKind kind = test_kind_from_string(cfg.test);
    if (kind == TestKind::pointwise) {
      const double tau = cfg.tau.value_or(0.5);
      const std::size_t j = pf.proc.grid.nearest(tau);
      if (std::abs(pf.proc.grid[j] - tau) > 1e-9)
        throw ValidationError("tau " + std::to_string(tau) + " is not on the stored grid");
      t = pointwise_test_se(pf.proc.fits[j], pf.se(static_cast<Index>(j), c), c, cfg.null_value, cfg.alpha);
    } else {
      if (cfg.draws_path.empty()) throw ValidationError("KS and CvM tests need --draws");
      const BootstrapDraws d = read_draws(cfg.draws_path);
      const double v = cfg.null_value;
      t = functional_test(pf.proc, d, pf.se, c, [v](double) { return v; }, kind, cfg.alpha);
    }
    Json j = to_json(t);
    j["coefficient"] = detail::coef_name(pf.names, c);
    j["null_value"] = cfg.null_value;
    detail::emit(cfg, j.dump(2) + "\n");
    return kExitOk;
  });
}

/// Uniform confidence bands from a stored process and draws.
inline int cmd_bands(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    if (cfg.process_path.empty() || cfg.draws_path.empty()) throw ValidationError("bands needs --process and --draws");
    const ProcessFile pf = read_process(cfg.process_path);
    if (pf.se.size() == 0) throw ValidationError("process file carries no standard errors");
    const BootstrapDraws d = read_draws(cfg.draws_path);
    std::vector<Index> coefs;
    for (const auto& s : cfg.coefficients) coefs.push_back(detail::coefficient_index(s, pf.names, pf.proc.k()));
    const UniformBands u = uniform_bands(pf.proc, d, pf.se, cfg.alpha, coefs);
    if (cfg.format == "json")
      detail::emit(cfg, to_json(u, pf.names).dump(2) + "\n");
    else {
      if (cfg.output.empty()) throw ValidationError("CSV bands output needs --output");
      write_bands_csv(u, pf.names, cfg.output);
    }
    return kExitOk;
  });
}

inline Design design_from_string(const std::string& s, Index k) {
  if (s == "hagemann") return Design::hagemann();
  if (s == "location-scale" || s == "location_scale") return Design::location_scale(k);
  if (s == "location-scale-homoskedastic") return Design::location_scale(k, false);
  throw ValidationError("unknown design '" + s + "'");
}

/// Monte Carlo studies; the report is JSON.
inline int cmd_simulate(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    if (cfg.R < 1) throw ValidationError("--R must be positive");
    if (cfg.n < 2) throw ValidationError("--n must be at least 2");
    const Design design = design_from_string(cfg.design, cfg.k);
    Json report;
    if (cfg.study == "accuracy") {
      const QuantileGrid grid = QuantileGrid::parse(cfg.taus);
      report = to_json(mc_relative_accuracy(design, cfg.n, grid, cfg.R, cfg.seed, cfg.workers, cfg.start_tau));
    } else if (cfg.study == "pointwise") {
      PointwiseStudy st;
      st.tau = cfg.tau.value_or(0.5);
      st.alpha = cfg.alpha;
      st.B_empirical = cfg.B_empirical;
      st.B_score = cfg.B_score;
      st.scheme = cfg.scheme;
      st.false_null_shift = cfg.false_null_shift;
      if (design.kind != DesignKind::hagemann) {
        if (cfg.coefficient.empty()) throw ValidationError("pointwise study on this design needs --coefficient");
      }
      if (!cfg.coefficient.empty()) st.coefficient = detail::coefficient_index(cfg.coefficient, {}, design.k);
      if (!cfg.methods.empty()) {
        st.methods.clear();
        for (const auto& m : cfg.methods) st.methods.push_back(inference_method_from_string(m));
      }
      report = to_json(mc_size_power(design, cfg.n, st, cfg.R, cfg.seed, cfg.workers));
    } else if (cfg.study == "functional") {
      if (design.kind != DesignKind::hagemann) throw ValidationError("functional study uses the hagemann design");
      FunctionalStudy st;
      st.grid = QuantileGrid::parse(cfg.taus);
      st.alpha = cfg.alpha;
      st.B = cfg.B;
      st.scheme = cfg.scheme;
      if (!cfg.methods.empty()) {
        st.methods.clear();
        for (const auto& m : cfg.methods) {
          if (m == "empirical") st.methods.push_back(FunctionalMethod::empirical);
          else if (m == "empirical-onestep") st.methods.push_back(FunctionalMethod::empirical_onestep);
          else if (m == "multiplier") st.methods.push_back(FunctionalMethod::multiplier);
          else if (m == "multiplier-onestep") st.methods.push_back(FunctionalMethod::multiplier_onestep);
          else throw ValidationError("unknown functional method '" + m + "'");
        }
      }
      report = to_json(mc_functional(design, cfg.n, st, cfg.R, cfg.seed, cfg.workers));
    } else {
      throw ValidationError("unknown study '" + cfg.study + "'");
    }
    detail::emit(cfg, report.dump(2) + "\n");
    return kExitOk;
  });
}

/// Engine timings: markdown table on stdout, JSON to --output when given.
inline int cmd_bench(const RunConfig& cfg) {
  return detail::guarded([&] {
    cfg.validate();
    BenchPanels panels{false, false, false};
    std::size_t pos = 0;
    while (pos <= cfg.panels.size()) {
      const auto next = std::min(cfg.panels.find(',', pos), cfg.panels.size());
      const std::string p = cfg.panels.substr(pos, next - pos);
      if (p == "single") panels.single = true;
      else if (p == "process") panels.process = true;
      else if (p == "bootstrap") panels.bootstrap = true;
      else throw ValidationError("unknown bench panel '" + p + "'");
      pos = next + 1;
    }
    const BenchReport rep =
        bench_engines(cfg.n, cfg.k, QuantileGrid::parse(cfg.taus), cfg.B, cfg.repetitions, cfg.seed, panels);
    std::cout << rep.markdown();
    if (!cfg.output.empty()) detail::write_text(cfg.output, to_json(rep).dump(2) + "\n");
    return kExitOk;
  });
}

}  // namespace qrp
