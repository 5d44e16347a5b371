#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <boost/random/exponential_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <Eigen/Dense>

#include "qrp/core_model.hpp"
#include "qrp/detail/parallel.hpp"
#include "qrp/errors.hpp"
#include "qrp/onestep.hpp"
#include "qrp/preprocess.hpp"
#include "qrp/rng.hpp"
#include "qrp/solver.hpp"

namespace qrp {

enum class WeightScheme { bayesian_exponential, gaussian, wild, multinomial };

inline std::string to_string(WeightScheme s) {
  switch (s) {
    case WeightScheme::bayesian_exponential: return "bayesian_exponential";
    case WeightScheme::gaussian: return "gaussian";
    case WeightScheme::wild: return "wild";
    case WeightScheme::multinomial: return "multinomial";
  }
  return "unknown";
}

inline WeightScheme scheme_from_string(std::string_view s) {
  if (s == "bayesian_exponential" || s == "exponential") return WeightScheme::bayesian_exponential;
  if (s == "gaussian") return WeightScheme::gaussian;
  if (s == "wild") return WeightScheme::wild;
  if (s == "multinomial") return WeightScheme::multinomial;
  throw ValidationError("unknown weight scheme '" + std::string(s) + "'");
}

/// n i.i.d. multiplier draws. The three score schemes have mean 0 and
/// variance 1; multinomial returns resampling counts summing to n.
inline Vector draw_weights(WeightScheme scheme, Index n, Engine64& rng) {
  if (n < 1) throw DomainError("draw_weights: n must be positive");
  Vector w(n);
  switch (scheme) {
    case WeightScheme::bayesian_exponential: {
      boost::random::exponential_distribution<double> e(1.0);
      for (Index i = 0; i < n; ++i) w(i) = e(rng) - 1.0;
      break;
    }
    case WeightScheme::gaussian: {
      boost::random::normal_distribution<double> z;
      for (Index i = 0; i < n; ++i) w(i) = z(rng);
      break;
    }
    case WeightScheme::wild: {
      boost::random::normal_distribution<double> z;
      const double r2 = 1.0 / std::sqrt(2.0);
      for (Index i = 0; i < n; ++i) {
        const double a = z(rng);
        const double b = z(rng);
        w(i) = a * r2 + 0.5 * (b * b - 1.0);
      }
      break;
    }
    case WeightScheme::multinomial: {
      w.setZero();
      boost::random::uniform_int_distribution<Index> pick(0, n - 1);
      for (Index i = 0; i < n; ++i) w(pick(rng)) += 1.0;
      break;
    }
  }
  return w;
}

/// Bootstrap coefficient draws stored replicate-major: value (b, j, c) sits
/// at index (b * J + j) * k + c.
struct BootstrapDraws {
  QuantileGrid grid;
  Index B = 0;
  Index k = 0;
  std::vector<double> values;
  std::string method;  // empirical, empirical-onestep, score
  std::string scheme;
  std::uint64_t base_seed = 0;
  std::vector<std::string> coef_names;
  Index requested = 0;              // replicates attempted
  std::vector<Index> replicate_ids;  // original index of each stored replicate

  std::size_t J() const { return grid.size(); }
  Index failed() const { return requested - B; }

  double at(Index b, std::size_t j, Index c) const {
    return values[static_cast<std::size_t>((b * static_cast<Index>(J()) + static_cast<Index>(j)) * k + c)];
  }
  double& at(Index b, std::size_t j, Index c) {
    return values[static_cast<std::size_t>((b * static_cast<Index>(J()) + static_cast<Index>(j)) * k + c)];
  }

  /// B-vector of draws for coefficient c at grid point j.
  Vector coefficient(std::size_t j, Index c) const {
    Vector v(B);
    for (Index b = 0; b < B; ++b) v(b) = at(b, j, c);
    return v;
  }

  /// J x k matrix of replicate b.
  Matrix replicate(Index b) const {
    Matrix m(static_cast<Index>(J()), k);
    for (std::size_t j = 0; j < J(); ++j)
      for (Index c = 0; c < k; ++c) m(static_cast<Index>(j), c) = at(b, j, c);
    return m;
  }

  /// J x k matrix of bootstrap standard deviations.
  Matrix standard_deviations() const {
    Matrix sd(static_cast<Index>(J()), k);
    for (std::size_t j = 0; j < J(); ++j)
      for (Index c = 0; c < k; ++c) {
        const Vector v = coefficient(j, c);
        const double mean = v.mean();
        sd(static_cast<Index>(j), c) =
            B > 1 ? std::sqrt((v.array() - mean).square().sum() / static_cast<double>(B - 1)) : 0.0;
      }
    return sd;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open '" + path + "' for writing");
    out << "replicate,tau,coefficient,value\n";
    for (Index b = 0; b < B; ++b)
      for (std::size_t j = 0; j < J(); ++j)
        for (Index c = 0; c < k; ++c)
          out << replicate_ids[static_cast<std::size_t>(b)] << ',' << detail::format_double(grid[j]) << ',' << name(c)
              << ',' << detail::format_double(at(b, j, c)) << '\n';
  }

  /// "QRBD" block: magic, u32 version, u64 B, u64 J, u64 k, u64 seed,
  /// J taus, then B*J*k values; all little-endian.
  void write_qrbd(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open '" + path + "' for writing");
    out.write("QRBD", 4);
    put_u32(out, 1);
    put_u64(out, static_cast<std::uint64_t>(B));
    put_u64(out, static_cast<std::uint64_t>(J()));
    put_u64(out, static_cast<std::uint64_t>(k));
    put_u64(out, base_seed);
    for (double t : grid.taus()) put_f64(out, t);
    for (double v : values) put_f64(out, v);
    if (!out) throw ValidationError("write to '" + path + "' failed");
  }

  static BootstrapDraws read_qrbd(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "QRBD", 4) != 0) throw ParseError("'" + path + "' is not a QRBD file", 0);
    if (get_u32(in) != 1) throw ParseError("unsupported QRBD version", 0);
    BootstrapDraws d;
    d.B = static_cast<Index>(get_u64(in));
    const auto J = get_u64(in);
    d.k = static_cast<Index>(get_u64(in));
    d.base_seed = get_u64(in);
    if (!in || J == 0 || d.k <= 0 || d.B < 0) throw ParseError("corrupt QRBD header", 0);
    std::vector<double> taus(J);
    for (auto& t : taus) t = get_f64(in);
    d.grid = QuantileGrid(taus);
    d.values.resize(static_cast<std::size_t>(d.B) * J * static_cast<std::size_t>(d.k));
    for (auto& v : d.values) v = get_f64(in);
    if (!in) throw ParseError("truncated QRBD file", 0);
    d.requested = d.B;
    d.replicate_ids.resize(static_cast<std::size_t>(d.B));
    std::iota(d.replicate_ids.begin(), d.replicate_ids.end(), Index{0});
    return d;
  }

 private:
  std::string name(Index c) const {
    return static_cast<std::size_t>(c) < coef_names.size() ? coef_names[static_cast<std::size_t>(c)]
                                                            : "x" + std::to_string(c);
  }
  static void put_u64(std::ostream& o, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 8);
  }
  static void put_u32(std::ostream& o, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 4);
  }
  static void put_f64(std::ostream& o, double v) { put_u64(o, std::bit_cast<std::uint64_t>(v)); }
  static std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8] = {};
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  static std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4] = {};
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  static double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }
};

struct BootstrapConfig {
  Index B = 100;
  std::uint64_t seed = 1;
  int workers = 0;  // 0: QRPROC_WORKERS or 1
  WeightScheme scheme = WeightScheme::gaussian;  // score bootstrap only
  PreprocessConfig preprocess = PreprocessConfig::process();
  SolverOptions solver;
  OnestepConfig onestep;
  double max_failure_rate = 0.05;
  // Test hook: identity resample (empirical) or zero multipliers (score).
  bool degenerate = false;

  void validate() const {
    if (B < 1) throw DomainError("bootstrap: B must be at least 1");
    if (!(max_failure_rate >= 0.0 && max_failure_rate < 1.0))
      throw DomainError("bootstrap: max_failure_rate must lie in [0,1)");
    preprocess.validate();
    solver.validate();
    onestep.validate();
  }
};

namespace detail {

inline Vector replicate_counts(const BootstrapConfig& cfg, Index n, Index r) {
  if (cfg.degenerate) return Vector::Ones(n);
  Engine64 rng = make_stream(cfg.seed, static_cast<std::uint64_t>(r));
  return draw_weights(WeightScheme::multinomial, n, rng);
}

/// Runs `one(r, out)` for every replicate, collects the successful ones in
/// replicate order and enforces the failure ceiling.
template <class One>
BootstrapDraws run_replicates(const QuantileGrid& grid, Index k, const BootstrapConfig& cfg, std::string method,
                              const std::vector<std::string>& names, One&& one) {
  const auto J = static_cast<Index>(grid.size());
  const Index B = cfg.B;
  std::vector<double> slots(static_cast<std::size_t>(B * J * k));
  std::vector<char> ok(static_cast<std::size_t>(B), 0);
  parallel_for(static_cast<std::size_t>(B), resolve_workers(cfg.workers), [&](std::size_t r) {
    double* dst = slots.data() + r * static_cast<std::size_t>(J * k);
    try {
      one(static_cast<Index>(r), dst);
      ok[r] = std::all_of(dst, dst + J * k, [](double v) { return std::isfinite(v); }) ? 1 : 0;
    } catch (const NumericalError&) {
      ok[r] = 0;
    }
  });
  BootstrapDraws d;
  d.grid = grid;
  d.k = k;
  d.method = std::move(method);
  d.base_seed = cfg.seed;
  d.coef_names = names;
  d.requested = B;
  for (Index r = 0; r < B; ++r) {
    if (!ok[static_cast<std::size_t>(r)]) continue;
    const auto* src = slots.data() + static_cast<std::size_t>(r * J * k);
    d.values.insert(d.values.end(), src, src + J * k);
    d.replicate_ids.push_back(r);
  }
  d.B = static_cast<Index>(d.replicate_ids.size());
  const double rate = static_cast<double>(B - d.B) / static_cast<double>(B);
  if (rate > cfg.max_failure_rate)
    throw RunError(std::to_string(B - d.B) + " of " + std::to_string(B) +
                   " bootstrap replicates failed (ceiling " + std::to_string(cfg.max_failure_rate) + ")");
  return d;
}

}  // namespace detail

/// Empirical bootstrap with preprocessing. Each replicate resamples rows
/// (as multiplicities) and re-solves every grid point exactly, starting from
/// the sample estimate at the first grid point and chaining afterwards.
inline BootstrapDraws bootstrap_qr_preprocessed(const Dataset& ds, const CoefProcess& sample,
                                                const BootstrapConfig& cfg = {}) {
  cfg.validate();
  if (sample.fits.size() != sample.grid.size() || sample.fits.empty())
    throw ValidationError("bootstrap: sample process is empty or misaligned");
  const Matrix& X = ds.X();
  const Vector& y = ds.y();
  const Vector z = residual_scale(X);
  const auto base = detail::PreprocessContext::of(X, y, nullptr, &z);
  const Vector first = sample.fits.front().beta;
  const Index k = ds.k();
  auto draws = detail::run_replicates(sample.grid, k, cfg, "empirical", ds.column_names(),
                                      [&](Index r, double* dst) {
    const Vector w = detail::replicate_counts(cfg, ds.n(), r);
    detail::PreprocessContext ctx = base;
    ctx.weights = &w;
    ctx.n_eff = w.sum();
    const auto fits = detail::process_fits(ctx, sample.grid, cfg.preprocess, cfg.solver, first);
    for (std::size_t j = 0; j < fits.size(); ++j)
      std::copy(fits[j].beta.data(), fits[j].beta.data() + k, dst + j * static_cast<std::size_t>(k));
  });
  draws.scheme = "multinomial";
  return draws;
}

inline BootstrapDraws bootstrap_qr_preprocessed(const Dataset& ds, const QuantileGrid& grid,
                                                const BootstrapConfig& cfg = {}) {
  return bootstrap_qr_preprocessed(ds, fit_process_preprocess(ds, grid, cfg.preprocess, cfg.solver), cfg);
}

/// Naive empirical bootstrap: materialises every resample and runs full
/// solves. Reference for equivalence audits and timing.
inline BootstrapDraws bootstrap_qr_naive(const Dataset& ds, const QuantileGrid& grid, const BootstrapConfig& cfg = {}) {
  cfg.validate();
  const Index k = ds.k();
  auto draws = detail::run_replicates(grid, k, cfg, "empirical-naive", ds.column_names(), [&](Index r, double* dst) {
    const Vector w = detail::replicate_counts(cfg, ds.n(), r);
    const auto m = static_cast<Index>(w.sum());
    Matrix Xb(m, k);
    Vector yb(m);
    Index row = 0;
    for (Index i = 0; i < ds.n(); ++i)
      for (int c = 0; c < static_cast<int>(w(i)); ++c) {
        Xb.row(row) = ds.X().row(i);
        yb(row++) = ds.y()(i);
      }
    for (std::size_t j = 0; j < grid.size(); ++j) {
      const QrFit f = solve_qr(Xb, yb, grid[j], cfg.solver);
      std::copy(f.beta.data(), f.beta.data() + k, dst + j * static_cast<std::size_t>(k));
    }
  });
  draws.scheme = "multinomial";
  return draws;
}

/// Empirical bootstrap of the one-step process: per replicate an exact
/// preprocessed fit at the start point, then one-step updates across the
/// grid on the resampled data.
inline BootstrapDraws bootstrap_onestep(const Dataset& ds, const CoefProcess& sample, const BootstrapConfig& cfg = {},
                                        std::optional<double> start_tau = std::nullopt) {
  cfg.validate();
  if (sample.fits.size() != sample.grid.size() || sample.fits.empty())
    throw ValidationError("bootstrap: sample process is empty or misaligned");
  const Matrix& X = ds.X();
  const Vector& y = ds.y();
  const std::size_t start = detail::start_index(sample.grid, start_tau);
  const Vector z = residual_scale(X);
  const auto base = detail::PreprocessContext::of(X, y, nullptr, &z);
  const Vector prelim = sample.fits[start].beta;
  const Vector prelim_r = y - X * prelim;
  const Index k = ds.k();
  auto draws = detail::run_replicates(sample.grid, k, cfg, "empirical-onestep", ds.column_names(),
                                      [&](Index r, double* dst) {
    const Vector w = detail::replicate_counts(cfg, ds.n(), r);
    detail::PreprocessContext ctx = base;
    ctx.weights = &w;
    ctx.n_eff = w.sum();
    auto out = detail::preprocess_solve(ctx, sample.grid[start], prelim, prelim_r, cfg.preprocess, cfg.solver);
    std::vector<QrFit> fits(sample.grid.size());
    out.fit.tau = sample.grid[start];
    fits[start] = std::move(out.fit);
    std::vector<std::optional<JacobianEstimate>> jac;
    const auto s = detail::WeightedSample::of(X, y, &w);
    detail::onestep_march(s, sample.grid, start, fits, out.residuals, jac, cfg.onestep);
    for (std::size_t j = 0; j < fits.size(); ++j)
      std::copy(fits[j].beta.data(), fits[j].beta.data() + k, dst + j * static_cast<std::size_t>(k));
  });
  draws.scheme = "multinomial";
  return draws;
}

/// Score multiplier bootstrap: beta*(tau) = beta(tau) + J(tau)^-1 (1/n)
/// sum xi_i s_i(tau) with s_i(tau) = (tau - 1(r_i <= 0)) x_i. One multiplier
/// vector per replicate is shared by every grid point.
inline BootstrapDraws score_multiplier_bootstrap(const Dataset& ds, const CoefProcess& proc,
                                                 const BootstrapConfig& cfg = {}) {
  cfg.validate();
  if (!proc.has_all_jacobians())
    throw ValidationError("score bootstrap needs a Jacobian at every grid point");
  const Matrix& X = ds.X();
  const Vector& y = ds.y();
  const Index n = ds.n();
  const Index k = ds.k();
  const std::size_t J = proc.grid.size();
  const Index B = cfg.B;

  std::vector<Eigen::LDLT<Matrix>> solvers;
  solvers.reserve(J);
  for (std::size_t j = 0; j < J; ++j) {
    const auto& est = *proc.jacobians[j];
    if (detail::is_singular(est))
      throw SingularJacobianError("score bootstrap: Jacobian is singular at tau = " + std::to_string(proc.grid[j]),
                                  proc.grid[j], est.min_eigenvalue);
    solvers.emplace_back(est.J_hat);
  }
  // residual sign indicators 1(r_i <= 0) per grid point
  std::vector<std::vector<char>> neg(J, std::vector<char>(static_cast<std::size_t>(n)));
  for (std::size_t j = 0; j < J; ++j) {
    const Vector r = y - X * proc.fits[j].beta;
    for (Index i = 0; i < n; ++i) neg[j][static_cast<std::size_t>(i)] = r(i) <= 0.0 ? 1 : 0;
  }
#ifdef QRP_SCORE_MINUS_SIGN
  const double sign = -1.0;
#else
  const double sign = 1.0;
#endif

  BootstrapDraws d;
  d.grid = proc.grid;
  d.k = k;
  d.B = B;
  d.requested = B;
  d.method = "score";
  d.scheme = to_string(cfg.scheme);
  d.base_seed = cfg.seed;
  d.coef_names = ds.column_names();
  d.values.resize(static_cast<std::size_t>(B) * J * static_cast<std::size_t>(k));
  d.replicate_ids.resize(static_cast<std::size_t>(B));
  std::iota(d.replicate_ids.begin(), d.replicate_ids.end(), Index{0});

  // Replicates are processed in column blocks. For a block of multipliers
  // Xi (n x b): sum_i xi_i s_i(tau) = tau X'Xi - X' diag(neg) Xi, and the
  // second term is updated incrementally as rows change sign along the grid.
  constexpr Index kBlock = 64;
  const Index blocks = (B + kBlock - 1) / kBlock;
  detail::parallel_for(static_cast<std::size_t>(blocks), detail::resolve_workers(cfg.workers), [&](std::size_t blk) {
    const Index b0 = static_cast<Index>(blk) * kBlock;
    const Index nb = std::min(kBlock, B - b0);
    Matrix Xi(n, nb);
    for (Index c = 0; c < nb; ++c) {
      if (cfg.degenerate) {
        Xi.col(c).setZero();
      } else {
        Engine64 rng = make_stream(cfg.seed, static_cast<std::uint64_t>(b0 + c));
        Xi.col(c) = draw_weights(cfg.scheme, n, rng);
      }
    }
    const Matrix XtXi = X.transpose() * Xi;
    Matrix G(k, nb);  // X' diag(neg_j) Xi
    {
      Vector ind(n);
      for (Index i = 0; i < n; ++i) ind(i) = neg[0][static_cast<std::size_t>(i)];
      G.noalias() = X.transpose() * (Xi.array().colwise() * ind.array()).matrix();
    }
    for (std::size_t j = 0; j < J; ++j) {
      if (j > 0) {
        for (Index i = 0; i < n; ++i) {
          const char now = neg[j][static_cast<std::size_t>(i)];
          const char before = neg[j - 1][static_cast<std::size_t>(i)];
          if (now == before) continue;
          const double s = now ? 1.0 : -1.0;
          G.noalias() += s * X.row(i).transpose() * Xi.row(i);
        }
      }
      const Matrix score = (proc.grid[j] * XtXi - G) / static_cast<double>(n);
      const Matrix step = solvers[j].solve(score);
      for (Index c = 0; c < nb; ++c)
        for (Index p = 0; p < k; ++p) d.at(b0 + c, j, p) = proc.fits[j].beta(p) + sign * step(p, c);
    }
  });
  return d;
}

}  // namespace qrp
