#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "qrp/core_model.hpp"
#include "qrp/errors.hpp"
#include "qrp/rng.hpp"
#include "qrp/solver.hpp"

namespace qrp {

enum class KeptSizeExponent { two_thirds, one_half };

struct PreprocessConfig {
  double m = 3.0;
  int allowed_bad_signs = 0;
  int max_rounds = 10;
  KeptSizeExponent kept_size_exponent = KeptSizeExponent::one_half;
  std::uint64_t seed = 20240601;  // subsample draws of the single-quantile variant

  /// Portnoy-Koenker defaults: m = 0.8, kept size proportional to (kn)^(2/3).
  static PreprocessConfig single_tau() {
    PreprocessConfig c;
    c.m = 0.8;
    c.kept_size_exponent = KeptSizeExponent::two_thirds;
    return c;
  }

  /// Process / bootstrap defaults: m = 3, kept size proportional to (kn)^(1/2).
  static PreprocessConfig process() { return {}; }

  void validate() const {
    if (!(m > 0.0)) throw DomainError("preprocessing multiplier m must be positive");
    if (max_rounds < 1) throw DomainError("max_rounds must be at least 1");
    if (allowed_bad_signs < 0) throw DomainError("allowed_bad_signs must be non-negative");
  }

  /// (kn)^(2/3) or (kn)^(1/2); the kept size is M = m times this.
  double base_size(double n, Index k) const {
    const double kn = static_cast<double>(k) * n;
    return kept_size_exponent == KeptSizeExponent::two_thirds ? std::pow(kn, 2.0 / 3.0) : std::sqrt(kn);
  }
};

struct Partition {
  std::vector<Index> J_L;   // predicted negative residuals
  std::vector<Index> J_H;   // predicted positive residuals
  std::vector<Index> kept;  // solved explicitly
};

/// z_i = sqrt(x_i' (X'X/n)^{-1} x_i): a cheap, conservative scale for the
/// residual of row i.
inline Vector residual_scale(const Matrix& X) {
  const auto n = static_cast<double>(X.rows());
  const Matrix G = X.transpose() * X / n;
  Eigen::LLT<Matrix> llt(G);
  if (llt.info() != Eigen::Success || !has_full_column_rank(X))
    throw RankError("residual_scale: design matrix is rank-deficient");
  // L^{-1} X' column norms
  const Matrix W = llt.matrixL().solve(X.transpose());
  Vector z = W.colwise().norm().transpose();
  for (Index i = 0; i < z.size(); ++i)
    if (!(z(i) > 0.0)) z(i) = std::numeric_limits<double>::min();
  return z;
}

inline Vector residual_scale(const Dataset& ds) { return residual_scale(ds.X()); }

namespace detail {

/// Window of M consecutive ranks of r/z centred on rank n*tau. The window
/// shifts inward at the boundaries so exactly M rows are kept (ties aside).
/// `weights` are integer row multiplicities; rows with zero weight are
/// dropped from every set.
inline Partition partition_ratios(const Vector& ratio, double tau, Index M, const Vector* weights) {
  const Index n = ratio.size();
  Partition p;
  std::vector<double> sorted;
  double n_eff = 0.0;
  if (weights == nullptr) {
    sorted.assign(ratio.data(), ratio.data() + n);
    n_eff = static_cast<double>(n);
  } else {
    sorted.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const auto c = static_cast<long>(std::llround((*weights)(i)));
      for (long t = 0; t < c; ++t) sorted.push_back(ratio(i));
    }
    n_eff = static_cast<double>(sorted.size());
  }
  const auto total = static_cast<Index>(sorted.size());
  auto active = [&](Index i) { return weights == nullptr || (*weights)(i) > 0.0; };

  if (M >= total) {
    for (Index i = 0; i < n; ++i)
      if (active(i)) p.kept.push_back(i);
    return p;
  }
  const double centre = n_eff * tau - 0.5 * static_cast<double>(M);
  const Index lo = std::clamp<Index>(static_cast<Index>(std::llround(centre)), 0, total - M);
  const Index hi = lo + M - 1;
  auto lo_it = sorted.begin() + lo;
  std::nth_element(sorted.begin(), lo_it, sorted.end());
  const double q_lo = *lo_it;
  auto hi_it = sorted.begin() + hi;
  std::nth_element(lo_it, hi_it, sorted.end());
  const double q_hi = *hi_it;

  p.kept.reserve(static_cast<std::size_t>(M) + 8);
  for (Index i = 0; i < n; ++i) {
    if (!active(i)) continue;
    const double v = ratio(i);
    if (lo > 0 && v < q_lo)
      p.J_L.push_back(i);
    else if (hi < total - 1 && v > q_hi)
      p.J_H.push_back(i);
    else
      p.kept.push_back(i);
  }
  return p;
}

/// Data shared by every preprocessing solve on one sample.
struct PreprocessContext {
  const Matrix* X = nullptr;
  const Vector* y = nullptr;
  Vector z_inv;                    // 1 / z_i
  GlobScale scale;
  const Vector* weights = nullptr;  // row multiplicities, or null for unit weights
  double n_eff = 0.0;

  static PreprocessContext of(const Matrix& X, const Vector& y, const Vector* weights = nullptr,
                              const Vector* z = nullptr) {
    PreprocessContext c;
    c.X = &X;
    c.y = &y;
    c.z_inv = (z ? *z : residual_scale(X)).cwiseInverse();
    c.scale = GlobScale::of(X, y);
    c.weights = weights;
    c.n_eff = weights ? weights->sum() : static_cast<double>(X.rows());
    return c;
  }
};

struct PreprocessOutcome {
  QrFit fit;
  Vector residuals;  // y - X beta on every original row
};

/// Full solve of the (weighted) sample, used for small problems and fallback.
inline PreprocessOutcome full_weighted_solve(const PreprocessContext& ctx, double tau,
                                             const SolverOptions& opts, const Vector* warm) {
  const Matrix& X = *ctx.X;
  const Vector& y = *ctx.y;
  PreprocessOutcome out;
  if (ctx.weights == nullptr) {
    out.fit = detail::solve_rows(X, y, tau, opts, warm, X.rows(), Engine::preprocess);
  } else {
    std::vector<Index> rows;
    for (Index i = 0; i < X.rows(); ++i)
      if ((*ctx.weights)(i) > 0.0) rows.push_back(i);
    Matrix Xw(static_cast<Index>(rows.size()), X.cols());
    Vector yw(static_cast<Index>(rows.size()));
    for (std::size_t m = 0; m < rows.size(); ++m) {
      const double wi = (*ctx.weights)(rows[m]);
      Xw.row(static_cast<Index>(m)) = wi * X.row(rows[m]);
      yw(static_cast<Index>(m)) = wi * y(rows[m]);
    }
    out.fit = detail::solve_rows(Xw, yw, tau, opts, warm, Xw.rows(), Engine::preprocess);
    out.fit.moment_inf_norm *= static_cast<double>(Xw.rows()) / ctx.n_eff;
  }
  out.residuals = y - X * out.fit.beta;
  out.fit.kept = X.rows();
  return out;
}

enum class AttemptStatus { accepted, restart, exhausted };

struct AttemptResult {
  AttemptStatus status = AttemptStatus::accepted;
  PreprocessOutcome outcome;
};

/// Steps 2-4 for one window size M: partition, solve the globbed problem,
/// check the glob signs and evict mispredicted rows until accepted, or ask
/// for a restart when too many signs are wrong. `rounds` counts every
/// re-solve after the first and is shared across restarts.
inline AttemptResult attempt_window(const PreprocessContext& ctx, double tau, const Vector& prelim,
                                    const Vector& prelim_residuals, Index M,
                                    const PreprocessConfig& cfg, const SolverOptions& opts,
                                    int& rounds, int& iterations) {
  const Matrix& X = *ctx.X;
  const Vector& y = *ctx.y;
  const Vector ratio = prelim_residuals.cwiseProduct(ctx.z_inv);
  Partition part = partition_ratios(ratio, tau, M, ctx.weights);

  AttemptResult res;
  Vector warm = prelim;
  while (true) {
    const GlobbedProblem gp = make_globbed(X, y, part.kept, part.J_L, part.J_H, prelim, ctx.scale, ctx.weights);
    QrFit fit = solve_globbed(gp, tau, opts, warm);
    iterations += fit.iterations;
    Vector r = y - X * fit.beta;

    std::vector<Index> bad_L, bad_H;
    for (Index i : part.J_L)
      if (r(i) >= 0.0) bad_L.push_back(i);
    for (Index i : part.J_H)
      if (r(i) <= 0.0) bad_H.push_back(i);
    const auto bad = static_cast<double>(bad_L.size() + bad_H.size());

    if (bad <= cfg.allowed_bad_signs) {
      const Index kept = gp.X_kept.rows();
      fit.engine = Engine::preprocess;
      fit.iterations = iterations;
      fit.kept = kept;
      fit.objective = 0.0;
      for (Index i = 0; i < X.rows(); ++i) {
        const double wi = ctx.weights ? (*ctx.weights)(i) : 1.0;
        if (wi > 0.0) fit.objective += wi * detail::rho(tau, r(i));
      }
      if (bad > 0 || ctx.weights != nullptr) {
        Vector psi(r.size());
        for (Index i = 0; i < r.size(); ++i) {
          const double wi = ctx.weights ? (*ctx.weights)(i) : 1.0;
          psi(i) = wi * (tau - (r(i) <= 0.0 ? 1.0 : 0.0));
        }
        fit.moment_inf_norm = (X.transpose() * psi / ctx.n_eff).cwiseAbs().maxCoeff();
      }
      res.status = AttemptStatus::accepted;
      res.outcome.fit = std::move(fit);
      res.outcome.residuals = std::move(r);
      return res;
    }
    if (++rounds > cfg.max_rounds) {
      res.status = AttemptStatus::exhausted;
      return res;
    }
    if (bad < 0.1 * static_cast<double>(M)) {
      auto evict = [](std::vector<Index>& set, const std::vector<Index>& out) {
        std::vector<Index> keep;
        keep.reserve(set.size());
        std::set_difference(set.begin(), set.end(), out.begin(), out.end(), std::back_inserter(keep));
        set.swap(keep);
      };
      evict(part.J_L, bad_L);
      evict(part.J_H, bad_H);
      part.kept.insert(part.kept.end(), bad_L.begin(), bad_L.end());
      part.kept.insert(part.kept.end(), bad_H.begin(), bad_H.end());
      warm = fit.beta;
      continue;
    }
    res.status = AttemptStatus::restart;
    return res;
  }
}

inline Index window_size(double m, double base, double n_eff) {
  return static_cast<Index>(std::min(n_eff, std::round(m * base)));
}

/// Preprocessed solve from a preliminary estimate, doubling m on restarts.
inline PreprocessOutcome preprocess_solve(const PreprocessContext& ctx, double tau, const Vector& prelim,
                                          const Vector& prelim_residuals, const PreprocessConfig& cfg,
                                          const SolverOptions& opts) {
  const Index k = ctx.X->cols();
  const double base = cfg.base_size(ctx.n_eff, k);
  double m = cfg.m;
  int rounds = 0;
  int iterations = 0;
  int restarts = 0;
  while (true) {
    const Index M = window_size(m, base, ctx.n_eff);
    if (static_cast<double>(M) >= ctx.n_eff) {
      PreprocessOutcome out = full_weighted_solve(ctx, tau, opts, &prelim);
      out.fit.iterations += iterations;
      out.fit.fixups = rounds;
      out.fit.restarts = restarts;
      return out;
    }
    AttemptResult a = attempt_window(ctx, tau, prelim, prelim_residuals, M, cfg, opts, rounds, iterations);
    if (a.status == AttemptStatus::accepted) {
      a.outcome.fit.fixups = rounds;
      a.outcome.fit.restarts = restarts;
      return std::move(a.outcome);
    }
    if (a.status == AttemptStatus::exhausted) break;
    m *= 2.0;
    ++restarts;
  }
  PreprocessOutcome out = full_weighted_solve(ctx, tau, opts, &prelim);
  out.fit.iterations += iterations;
  out.fit.fixups = cfg.max_rounds;
  out.fit.restarts = restarts;
  out.fit.fell_back = true;
  return out;
}

inline std::uint64_t tau_bits(double tau) {
  std::uint64_t b = 0;
  std::memcpy(&b, &tau, sizeof b);
  return b;
}

}  // namespace detail

/// Partition rows by the ratio r_i / z_i: the M rows whose ratios sit around
/// the tau quantile are kept, rows below go to J_L, rows above to J_H.
inline Partition partition(const Vector& residuals, const Vector& z, double tau, Index M) {
  require_tau(tau);
  if (M <= 0) throw DomainError("partition: window size M must be positive");
  if (residuals.size() != z.size()) throw ShapeError("partition: residuals and z differ in length");
  if (M > residuals.size()) M = residuals.size();
  const Vector ratio = residuals.cwiseQuotient(z);
  return detail::partition_ratios(ratio, tau, M, nullptr);
}

/// Preprocessed exact fit at tau from a preliminary estimate. The kept size
/// follows cfg.kept_size_exponent; with allowed_bad_signs = 0 the result is
/// the full-sample solution. Falls back to a full solve after max_rounds.
inline QrFit solve_preprocessed(const Dataset& ds, double tau, const Vector& prelim_beta,
                                const PreprocessConfig& cfg = PreprocessConfig::process(),
                                const SolverOptions& opts = {}) {
  require_tau(tau);
  cfg.validate();
  opts.validate();
  if (prelim_beta.size() != ds.k()) throw ShapeError("solve_preprocessed: preliminary beta has wrong length");
  if (!prelim_beta.allFinite()) throw DomainError("solve_preprocessed: preliminary beta is not finite");
  const auto ctx = detail::PreprocessContext::of(ds.X(), ds.y());
  const Vector r = ds.y() - ds.X() * prelim_beta;
  return detail::preprocess_solve(ctx, tau, prelim_beta, r, cfg, opts).fit;
}

/// Subsample size round((kn)^(2/3)) of the single-quantile variant.
inline Index pk_subsample_size(Index n, Index k) {
  return static_cast<Index>(std::llround(std::pow(static_cast<double>(k) * static_cast<double>(n), 2.0 / 3.0)));
}

namespace detail {
inline PreprocessOutcome fit_single_pk_impl(const PreprocessContext& ctx, double tau,
                                            const PreprocessConfig& cfg, const SolverOptions& opts) {
  const Matrix& X = *ctx.X;
  const Vector& y = *ctx.y;
  const Index n = X.rows();
  const Index k = X.cols();
  Index sub = pk_subsample_size(n, k);
  if (n <= sub) return full_weighted_solve(ctx, tau, opts, nullptr);

  std::mt19937_64 rng(stream_seed(cfg.seed, tau_bits(tau)));
  const double base = cfg.base_size(static_cast<double>(n), k);
  double m = cfg.m;
  int rounds = 0, iterations = 0, restarts = 0;
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  while (sub < n) {
    std::vector<Index> pick;
    pick.reserve(static_cast<std::size_t>(sub));
    std::sample(all.begin(), all.end(), std::back_inserter(pick), sub, rng);
    Matrix Xs(sub, k);
    Vector ys(sub);
    for (Index m2 = 0; m2 < sub; ++m2) {
      Xs.row(m2) = X.row(pick[static_cast<std::size_t>(m2)]);
      ys(m2) = y(pick[static_cast<std::size_t>(m2)]);
    }
    Vector prelim;
    try {
      const QrFit pre = detail::solve_rows(Xs, ys, tau, opts, nullptr, sub, Engine::baseline);
      iterations += pre.iterations;
      prelim = pre.beta;
    } catch (const NumericalError&) {
      prelim = Vector::Zero(k);
    }
    const Index M = window_size(m, base, static_cast<double>(n));
    if (M >= n) break;
    const Vector r = y - X * prelim;
    AttemptResult a = attempt_window(ctx, tau, prelim, r, M, cfg, opts, rounds, iterations);
    if (a.status == AttemptStatus::accepted) {
      a.outcome.fit.fixups = rounds;
      a.outcome.fit.restarts = restarts;
      return std::move(a.outcome);
    }
    if (a.status == AttemptStatus::exhausted) {
      PreprocessOutcome out = full_weighted_solve(ctx, tau, opts, nullptr);
      out.fit.iterations += iterations;
      out.fit.fixups = cfg.max_rounds;
      out.fit.restarts = restarts;
      out.fit.fell_back = true;
      return out;
    }
    sub *= 2;
    m *= 2.0;
    ++restarts;
  }
  PreprocessOutcome out = full_weighted_solve(ctx, tau, opts, nullptr);
  out.fit.iterations += iterations;
  out.fit.fixups = rounds;
  out.fit.restarts = restarts;
  return out;
}
}  // namespace detail

/// Single-quantile preprocessing: a subsample fit supplies the preliminary
/// estimate, then the globbed problem is solved with M = m (kn)^(2/3).
inline QrFit fit_single_pk(const Dataset& ds, double tau,
                           const PreprocessConfig& cfg = PreprocessConfig::single_tau(),
                           const SolverOptions& opts = {}) {
  require_tau(tau);
  cfg.validate();
  opts.validate();
  const auto ctx = detail::PreprocessContext::of(ds.X(), ds.y());
  return detail::fit_single_pk_impl(ctx, tau, cfg, opts).fit;
}

namespace detail {
/// Preprocessed fits across a grid on a prepared context. The first fit uses the
/// single-quantile variant; later fits start from the previous estimate.
inline std::vector<QrFit> process_fits(const PreprocessContext& ctx, const QuantileGrid& grid,
                                       const PreprocessConfig& cfg, const SolverOptions& opts,
                                       const std::optional<Vector>& first_prelim = std::nullopt) {
  std::vector<QrFit> fits;
  fits.reserve(grid.size());
  PreprocessOutcome prev;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const double tau = grid[j];
    if (j == 0) {
      if (first_prelim) {
        const Vector r = *ctx.y - *ctx.X * *first_prelim;
        prev = preprocess_solve(ctx, tau, *first_prelim, r, cfg, opts);
      } else {
        PreprocessConfig single = PreprocessConfig::single_tau();
        single.allowed_bad_signs = cfg.allowed_bad_signs;
        single.max_rounds = cfg.max_rounds;
        single.seed = cfg.seed;
        prev = fit_single_pk_impl(ctx, tau, single, opts);
      }
    } else {
      const Vector prelim = prev.fit.beta;
      prev = preprocess_solve(ctx, tau, prelim, prev.residuals, cfg, opts);
    }
    prev.fit.tau = tau;
    prev.fit.engine = Engine::preprocess;
    fits.push_back(prev.fit);
  }
  return fits;
}
}  // namespace detail

/// Coefficient process by recursive preprocessing: each fit seeds the next.
inline CoefProcess fit_process_preprocess(const Dataset& ds, const QuantileGrid& grid,
                                          const PreprocessConfig& cfg = PreprocessConfig::process(),
                                          const SolverOptions& opts = {}) {
  cfg.validate();
  opts.validate();
  const auto ctx = detail::PreprocessContext::of(ds.X(), ds.y());
  CoefProcess proc;
  proc.grid = grid;
  proc.fits = detail::process_fits(ctx, grid, cfg, opts);
  proc.jacobians.assign(grid.size(), std::nullopt);
  return proc;
}

/// Per-quantile full solves, warm-started from the previous grid point.
inline CoefProcess fit_process_full(const Dataset& ds, const QuantileGrid& grid, const SolverOptions& opts = {},
                                    bool warm_start = false) {
  CoefProcess proc;
  proc.grid = grid;
  std::optional<Vector> warm;
  for (double tau : grid.taus()) {
    QrFit f = solve_qr(ds, tau, opts, warm);
    if (warm_start) warm = f.beta;
    proc.fits.push_back(std::move(f));
  }
  proc.jacobians.assign(grid.size(), std::nullopt);
  return proc;
}

}  // namespace qrp
