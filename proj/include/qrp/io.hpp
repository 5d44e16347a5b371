#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "qrp/bootstrap.hpp"
#include "qrp/core_model.hpp"
#include "qrp/errors.hpp"
#include "qrp/inference.hpp"
#include "qrp/simulate.hpp"

namespace qrp {

using Json = nlohmann::ordered_json;

/// A coefficient process as stored on disk, with per-point standard errors
/// (J x k, empty when not computed).
struct ProcessFile {
  CoefProcess proc;
  Matrix se;
  std::vector<std::string> names;
  Index n = 0;
  Json meta = Json::object();
};

namespace detail {
inline Json vec_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector json_vec(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline std::string coef_name(const std::vector<std::string>& names, Index c) {
  return static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)] : "x" + std::to_string(c);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json parse_json(const std::string& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path + "': " + e.what(), 0);
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Processes

inline Json to_json(const ProcessFile& pf) {
  const CoefProcess& p = pf.proc;
  Json j;
  j["format"] = "qrprocess";
  j["version"] = 1;
  j["n"] = pf.n;
  j["k"] = p.k();
  j["coefficients"] = pf.names;
  j["grid"] = p.grid.taus();
  Json fits = Json::array();
  for (std::size_t t = 0; t < p.fits.size(); ++t) {
    const QrFit& f = p.fits[t];
    Json e;
    e["tau"] = f.tau;
    e["beta"] = detail::vec_json(f.beta);
    if (pf.se.size() > 0) e["se"] = detail::vec_json(pf.se.row(static_cast<Index>(t)).transpose());
    e["engine"] = to_string(f.engine);
    e["objective"] = f.objective;
    e["moment_inf_norm"] = f.moment_inf_norm;
    e["iterations"] = f.iterations;
    e["fixups"] = f.fixups;
    e["restarts"] = f.restarts;
    e["kept"] = f.kept;
    e["fell_back"] = f.fell_back;
    e["certified"] = f.certified;
    if (t < p.jacobians.size() && p.jacobians[t]) {
      e["bandwidth"] = p.jacobians[t]->h;
      e["jacobian_min_eigenvalue"] = p.jacobians[t]->min_eigenvalue;
    }
    fits.push_back(std::move(e));
  }
  j["fits"] = std::move(fits);
  j["meta"] = pf.meta;
  return j;
}

inline ProcessFile process_from_json(const Json& j) {
  try {
    if (j.value("format", "") != "qrprocess") throw ParseError("not a qrprocess document", 0);
    ProcessFile pf;
    pf.n = j.at("n").get<Index>();
    pf.names = j.at("coefficients").get<std::vector<std::string>>();
    pf.proc.grid = QuantileGrid(j.at("grid").get<std::vector<double>>());
    const auto& fits = j.at("fits");
    if (fits.size() != pf.proc.grid.size()) throw ParseError("fits and grid lengths differ", 0);
    const Index k = j.at("k").get<Index>();
    const bool has_se = !fits.empty() && fits[0].contains("se");
    if (has_se) pf.se.resize(static_cast<Index>(fits.size()), k);
    Index t = 0;
    for (const auto& e : fits) {
      QrFit f;
      f.tau = e.at("tau").get<double>();
      f.beta = detail::json_vec(e.at("beta"));
      if (f.beta.size() != k) throw ParseError("beta has the wrong length", 0);
      f.engine = engine_from_string(e.value("engine", "baseline"));
      f.objective = e.value("objective", 0.0);
      f.moment_inf_norm = e.value("moment_inf_norm", 0.0);
      f.iterations = e.value("iterations", 0);
      f.fixups = e.value("fixups", 0);
      f.restarts = e.value("restarts", 0);
      f.kept = e.value("kept", Index{0});
      f.fell_back = e.value("fell_back", false);
      f.certified = e.value("certified", false);
      if (has_se) pf.se.row(t) = detail::json_vec(e.at("se")).transpose();
      pf.proc.fits.push_back(std::move(f));
      ++t;
    }
    pf.proc.jacobians.resize(pf.proc.fits.size());
    if (j.contains("meta")) pf.meta = j["meta"];
    return pf;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed process document: ") + e.what(), 0);
  }
}

/// Long format: one row per (tau, coefficient) with diagnostics columns.
inline void write_process_csv(const ProcessFile& pf, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << "tau,coefficient,estimate,se,engine,iterations,fixups,restarts,kept,fell_back,moment_inf_norm\n";
  const CoefProcess& p = pf.proc;
  for (std::size_t t = 0; t < p.fits.size(); ++t) {
    const QrFit& f = p.fits[t];
    for (Index c = 0; c < p.k(); ++c) {
      out << detail::format_double(f.tau) << ',' << detail::coef_name(pf.names, c) << ','
          << detail::format_double(f.beta(c)) << ',';
      if (pf.se.size() > 0)
        out << detail::format_double(pf.se(static_cast<Index>(t), c));
      else
        out << "NA";
      out << ',' << to_string(f.engine) << ',' << f.iterations << ',' << f.fixups << ',' << f.restarts << ','
          << f.kept << ',' << (f.fell_back ? 1 : 0) << ',' << detail::format_double(f.moment_inf_norm) << '\n';
    }
  }
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

inline ProcessFile read_process_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("'" + path + "' is empty", 0);
  if (line.rfind("tau,coefficient,estimate,se", 0) != 0) throw ParseError("'" + path + "' is not a process CSV", 0);
  struct Row {
    double tau, est, se;
    std::string name, engine;
    int it, fix, rs;
    Index kept;
    bool fb;
    double mom;
  };
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 11) throw ParseError("process CSV row has the wrong number of cells", lineno);
    Row r{};
    double tmp = 0.0;
    auto num = [&](std::size_t c) {
      if (!detail::parse_double(cells[c], tmp)) throw ParseError("non-numeric process CSV cell", lineno);
      return tmp;
    };
    r.tau = num(0);
    r.name = detail::unquote(cells[1]);
    r.est = num(2);
    r.se = detail::trim(cells[3]) == "NA" ? std::numeric_limits<double>::quiet_NaN() : num(3);
    r.engine = std::string(detail::trim(cells[4]));
    r.it = static_cast<int>(num(5));
    r.fix = static_cast<int>(num(6));
    r.rs = static_cast<int>(num(7));
    r.kept = static_cast<Index>(num(8));
    r.fb = num(9) != 0.0;
    r.mom = num(10);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ParseError("'" + path + "' has no rows", 0);
  ProcessFile pf;
  std::vector<double> taus;
  for (const Row& r : rows) {
    if (taus.empty() || r.tau != taus.back()) taus.push_back(r.tau);
    if (taus.size() == 1) pf.names.push_back(r.name);
  }
  const auto k = static_cast<Index>(pf.names.size());
  if (rows.size() != taus.size() * static_cast<std::size_t>(k)) throw ParseError("ragged process CSV", 0);
  pf.proc.grid = QuantileGrid(taus);
  const bool has_se = !std::isnan(rows[0].se);
  if (has_se) pf.se.resize(static_cast<Index>(taus.size()), k);
  for (std::size_t t = 0; t < taus.size(); ++t) {
    QrFit f;
    f.beta.resize(k);
    for (Index c = 0; c < k; ++c) {
      const Row& r = rows[t * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)];
      if (r.tau != taus[t] || r.name != pf.names[static_cast<std::size_t>(c)])
        throw ParseError("process CSV rows are out of order", 0);
      f.beta(c) = r.est;
      if (has_se) pf.se(static_cast<Index>(t), c) = r.se;
      f.tau = r.tau;
      f.engine = engine_from_string(r.engine);
      f.iterations = r.it;
      f.fixups = r.fix;
      f.restarts = r.rs;
      f.kept = r.kept;
      f.fell_back = r.fb;
      f.moment_inf_norm = r.mom;
    }
    pf.proc.fits.push_back(std::move(f));
  }
  pf.proc.jacobians.resize(pf.proc.fits.size());
  return pf;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Reads a process from JSON or CSV, by extension.
inline ProcessFile read_process(const std::string& path) {
  if (has_suffix(path, ".csv")) return read_process_csv(path);
  return process_from_json(detail::parse_json(path));
}

inline BootstrapDraws read_draws(const std::string& path) {
  if (!has_suffix(path, ".qrbd")) throw ValidationError("bootstrap draws must be read from a .qrbd file");
  return BootstrapDraws::read_qrbd(path);
}

inline void write_draws(const BootstrapDraws& d, const std::string& path) {
  if (has_suffix(path, ".csv"))
    d.write_csv(path);
  else
    d.write_qrbd(path);
}

// ---------------------------------------------------------------------------
// Inference results

namespace detail {
inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
}  // namespace detail

inline Json to_json(const TestResult& t) {
  Json j;
  j["test"] = to_string(t.kind);
  j["statistic"] = t.statistic;
  j["critical_value"] = detail::finite_or_null(t.critical_value);
  j["p_value"] = t.p_value;
  j["alpha"] = t.alpha;
  j["reject"] = t.reject();
  j["null"] = t.null_description;
  j["grid"] = t.grid;
  return j;
}

inline Json to_json(const UniformBands& u, const std::vector<std::string>& names = {}) {
  Json j;
  j["alpha"] = u.alpha;
  j["critical_value"] = detail::finite_or_null(u.critical_value);
  j["grid"] = u.grid;
  Json coefs = Json::array();
  for (std::size_t q = 0; q < u.coefficients.size(); ++q) {
    Json c;
    c["coefficient"] = detail::coef_name(names, u.coefficients[q]);
    std::vector<double> est, lo, hi, pc;
    for (Index t = 0; t < u.estimate.rows(); ++t) {
      est.push_back(u.estimate(t, static_cast<Index>(q)));
      lo.push_back(u.lower(t, static_cast<Index>(q)));
      hi.push_back(u.upper(t, static_cast<Index>(q)));
      pc.push_back(u.pointwise_critical(t, static_cast<Index>(q)));
    }
    c["estimate"] = est;
    c["lower"] = lo;
    c["upper"] = hi;
    c["pointwise_critical"] = pc;
    coefs.push_back(std::move(c));
  }
  j["coefficients"] = std::move(coefs);
  return j;
}

inline void write_bands_csv(const UniformBands& u, const std::vector<std::string>& names, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << "tau,coefficient,estimate,lower,upper,uniform_critical,pointwise_critical\n";
  for (Index t = 0; t < u.estimate.rows(); ++t)
    for (std::size_t q = 0; q < u.coefficients.size(); ++q) {
      const auto qq = static_cast<Index>(q);
      using detail::format_double;
      out << format_double(u.grid[static_cast<std::size_t>(t)]) << ',' << detail::coef_name(names, u.coefficients[q])
          << ',' << format_double(u.estimate(t, qq)) << ',' << format_double(u.lower(t, qq)) << ','
          << format_double(u.upper(t, qq)) << ',' << format_double(u.critical_value) << ','
          << format_double(u.pointwise_critical(t, qq)) << '\n';
    }
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Simulation reports

inline Json to_json(const AccuracyMeasures& m) {
  return Json{{"squared_bias", m.squared_bias}, {"variance", m.variance}, {"mse", m.mse},
              {"median_bias", m.median_bias},   {"mad", m.mad},           {"mae", m.mae}};
}

inline Json to_json(const AccuracyReport& r) {
  Json j;
  j["study"] = "accuracy";
  j["design"] = r.design;
  j["n"] = r.n;
  j["k"] = r.k;
  j["replications"] = r.replications;
  j["seed"] = r.seed;
  j["grid"] = r.grid;
  j["converged"] = r.converged;
  j["convergence_rate"] = r.convergence_rate;
  j["convergence_rate_se"] =
      std::sqrt(r.convergence_rate * (1.0 - r.convergence_rate) / static_cast<double>(std::max<Index>(1, r.replications)));
  j["qr"] = to_json(r.qr);
  j["onestep"] = to_json(r.onestep);
  j["relative_mse"] = r.relative_mse;
  j["relative_mae"] = r.relative_mae;
  j["relative_mae_by_tau"] = r.relative_mae_by_tau;
  j["seconds"] = r.seconds;
  return j;
}

inline Json to_json(const SizePowerReport& r) {
  Json j;
  j["study"] = r.test;
  j["design"] = r.design;
  j["n"] = r.n;
  j["replications"] = r.replications;
  j["seed"] = r.seed;
  j["alpha"] = r.alpha;
  j["taus"] = r.taus;
  Json rates = Json::array();
  for (const auto& x : r.rates)
    rates.push_back(Json{{"method", x.label},
                         {"size", x.size},
                         {"size_se", x.size_se},
                         {"power", x.power},
                         {"power_se", x.power_se},
                         {"trials", x.trials}});
  j["rates"] = std::move(rates);
  j["seconds"] = r.seconds;
  return j;
}

inline Json to_json(const BenchReport& r) {
  Json j;
  j["study"] = "bench";
  j["n"] = r.n;
  j["k"] = r.k;
  j["taus"] = r.taus;
  j["B"] = r.B;
  j["repetitions"] = r.repetitions;
  j["seed"] = r.seed;
  Json rows = Json::array();
  for (const auto& x : r.rows)
    rows.push_back(Json{{"panel", x.panel}, {"engine", x.engine}, {"seconds", x.seconds}, {"speedup", x.speedup}});
  j["rows"] = std::move(rows);
  return j;
}

}  // namespace qrp
