#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qrp/core_model.hpp"
#include "qrp/detail/normal.hpp"
#include "qrp/errors.hpp"
#include "qrp/preprocess.hpp"
#include "qrp/solver.hpp"

namespace qrp {

struct OnestepConfig {
  double alpha = 0.05;  // level entering the bandwidth rule
  bool ridge = false;   // regularise near-singular Jacobians instead of failing
  PreprocessConfig start = PreprocessConfig::single_tau();

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0,1)");
    start.validate();
  }
};

/// Hall-Sheather bandwidth in quantile units:
/// n^(-1/3) z^(2/3) [1.5 phi(q)^2 / (2 q^2 + 1)]^(1/3), q = Phi^-1(tau),
/// z = Phi^-1(1 - alpha/2).
inline double hall_sheather_bandwidth(double tau, double n, double alpha = 0.05) {
  require_tau(tau);
  if (!(n >= 2.0)) throw DomainError("hall_sheather_bandwidth: n must be at least 2");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("hall_sheather_bandwidth: alpha outside (0,1)");
  const double q = detail::norm_quantile(tau);
  const double z = detail::norm_quantile(1.0 - alpha / 2.0);
  const double f = detail::norm_pdf(q);
  return std::cbrt(1.0 / n) * std::cbrt(z * z) * std::cbrt(1.5 * f * f / (2.0 * q * q + 1.0));
}

namespace detail {

/// Design, response and optional integer multiplicities.
struct WeightedSample {
  const Matrix* X = nullptr;
  const Vector* y = nullptr;
  const Vector* w = nullptr;
  double n_eff = 0.0;
  Vector col_means;

  static WeightedSample of(const Matrix& X, const Vector& y, const Vector* w = nullptr) {
    WeightedSample s;
    s.X = &X;
    s.y = &y;
    s.w = w;
    if (w) {
      s.n_eff = w->sum();
      s.col_means = X.transpose() * *w / s.n_eff;
    } else {
      s.n_eff = static_cast<double>(X.rows());
      s.col_means = X.colwise().mean().transpose();
    }
    return s;
  }

  double weight(Index i) const { return w ? (*w)(i) : 1.0; }
};

/// min(sd, IQR / 1.34) of the (weighted) residuals. `buf` is scratch space.
inline double residual_spread(const Vector& r, const Vector* w, std::vector<double>& buf) {
  double sum = 0.0, sum2 = 0.0, tot = 0.0;
  buf.clear();
  if (w == nullptr) {
    buf.assign(r.data(), r.data() + r.size());
    sum = r.sum();
    sum2 = r.squaredNorm();
    tot = static_cast<double>(r.size());
  } else {
    buf.reserve(static_cast<std::size_t>(w->sum() + 0.5));
    for (Index i = 0; i < r.size(); ++i) {
      const auto c = static_cast<long>(std::llround((*w)(i)));
      for (long t = 0; t < c; ++t) buf.push_back(r(i));
      sum += (*w)(i) * r(i);
      sum2 += (*w)(i) * r(i) * r(i);
      tot += (*w)(i);
    }
  }
  const double mean = sum / tot;
  const double sd = std::sqrt(std::max(0.0, (sum2 - tot * mean * mean) / std::max(1.0, tot - 1.0)));
  // type-7 sample quantiles; the second search only looks right of the first
  auto quant = [&](double p, std::size_t from) {
    const double h = p * static_cast<double>(buf.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    auto first = buf.begin() + static_cast<std::ptrdiff_t>(from);
    auto nth = buf.begin() + static_cast<std::ptrdiff_t>(lo);
    std::nth_element(first, nth, buf.end());
    const double a = *nth;
    if (lo + 1 >= buf.size()) return std::pair{a, lo};
    const double b = *std::min_element(nth + 1, buf.end());
    return std::pair{a + (h - static_cast<double>(lo)) * (b - a), lo};
  };
  const auto [q1, at] = quant(0.25, 0);
  const auto [q3, unused] = quant(0.75, at);
  (void)unused;
  const double spread = std::min(sd, (q3 - q1) / 1.34);
  return spread > 0.0 ? spread : std::max(sd, 1e-300);
}

inline double residual_spread(const Vector& r, const Vector* w) {
  std::vector<double> buf;
  return residual_spread(r, w, buf);
}

/// Reusable scratch buffers for repeated Jacobian evaluations.
struct JacobianWorkspace {
  Vector root_kernel;
  Matrix scaled;
  std::vector<Index> rows;
  std::vector<double> sorted;
};

/// Bandwidth in residual units: the quantile-unit Hall-Sheather value mapped
/// through the normal quantile function and scaled by the residual spread.
inline double bandwidth_from_spread(double tau, double n, double alpha, double spread) {
  double ht = hall_sheather_bandwidth(tau, n, alpha);
  ht = std::min(ht, 0.999 * std::min(tau, 1.0 - tau));
  const double width = norm_quantile(tau + ht) - norm_quantile(tau - ht);
  return width * spread;
}

inline double response_bandwidth(double tau, double n, double alpha, const Vector& r, const Vector* w) {
  return bandwidth_from_spread(tau, n, alpha, residual_spread(r, w));
}

/// Rows with |r| > kKernelCutoff * h carry kernel weight below 1e-8 of the
/// peak and are skipped.
inline constexpr double kKernelCutoff = 6.0;

inline JacobianEstimate jacobian_from_residuals(const WeightedSample& s, const Vector& r, double tau, double h,
                                                bool ridge, JacobianWorkspace& ws) {
  const Matrix& X = *s.X;
  const Index n = X.rows();
  const Index k = X.cols();
  const double inv_h = 1.0 / h;
  // sqrt(phi(u)) = exp(-u^2 / 4) / (2 pi)^(1/4); the constant goes into c below
  ws.root_kernel = (-0.25 * (r.array() * inv_h).square()).exp();
  if (s.w) ws.root_kernel.array() *= s.w->array().sqrt();
  const double floor = std::exp(-0.25 * kKernelCutoff * kKernelCutoff);
  ws.rows.clear();
  for (Index i = 0; i < n; ++i)
    if (ws.root_kernel(i) > floor) ws.rows.push_back(i);
  const auto m = static_cast<Index>(ws.rows.size());
  if (m > (4 * n) / 5) {
    ws.scaled.resize(n, k);
    ws.scaled.noalias() = (X.array().colwise() * ws.root_kernel.array()).matrix();
  } else {
    ws.scaled.resize(m, k);
    for (Index j = 0; j < k; ++j) {
      const double* col = X.col(j).data();
      double* dst = ws.scaled.col(j).data();
      for (Index t = 0; t < m; ++t) {
        const Index i = ws.rows[static_cast<std::size_t>(t)];
        dst[t] = col[i] * ws.root_kernel(i);
      }
    }
  }
  JacobianEstimate J;
  J.tau = tau;
  J.h = h;
  J.J_hat = Matrix::Zero(k, k);
  const double c = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * s.n_eff * h);
  J.J_hat.selfadjointView<Eigen::Lower>().rankUpdate(ws.scaled.transpose(), c);
  J.J_hat.triangularView<Eigen::StrictlyUpper>() = J.J_hat.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> es(J.J_hat, Eigen::EigenvaluesOnly);
  J.min_eigenvalue = es.eigenvalues()(0);
  const double trace = J.J_hat.trace();
  if (ridge && !(J.min_eigenvalue > 1e-12 * trace / static_cast<double>(k))) {
    const double lift = tau * std::max(trace, 1e-300) / static_cast<double>(k) * 1e-6;
    J.J_hat.diagonal().array() += lift;
    J.min_eigenvalue += lift;
  }
  return J;
}

inline JacobianEstimate jacobian_from_residuals(const WeightedSample& s, const Vector& r, double tau, double h,
                                                bool ridge = false) {
  JacobianWorkspace ws;
  return jacobian_from_residuals(s, r, tau, h, ridge, ws);
}

inline bool is_singular(const JacobianEstimate& J) {
  const auto k = static_cast<double>(J.J_hat.rows());
  const double trace = J.J_hat.trace();
  return !(trace > 0.0) || !(J.min_eigenvalue > 1e-12 * trace / k);
}

inline void require_invertible(const JacobianEstimate& J) {
  if (is_singular(J))
    throw SingularJacobianError("Jacobian is singular or nearly singular at tau = " + std::to_string(J.tau) +
                                    " (min eigenvalue " + std::to_string(J.min_eigenvalue) + ")",
                                J.tau, J.min_eigenvalue);
}

/// (1/n) sum w_i (tau - 1(r_i <= 0)) x_i.
inline Vector weighted_moment(const WeightedSample& s, const Vector& r, double tau) {
  Vector psi(r.size());
  for (Index i = 0; i < r.size(); ++i) psi(i) = s.weight(i) * (tau - (r(i) <= 0.0 ? 1.0 : 0.0));
  return s.X->transpose() * psi / s.n_eff;
}

inline double weighted_objective(const WeightedSample& s, const Vector& r, double tau) {
  double acc = 0.0;
  for (Index i = 0; i < r.size(); ++i) acc += s.weight(i) * rho(tau, r(i));
  return acc;
}

/// Marches from fits[start] outward over the grid. On entry `fits[start]`
/// and `start_residuals` hold the starting solution; Jacobians at every grid
/// point are written to `jacobians`.
inline void onestep_march(const WeightedSample& s, const QuantileGrid& grid, std::size_t start,
                          std::vector<QrFit>& fits, const Vector& start_residuals,
                          std::vector<std::optional<JacobianEstimate>>& jacobians, const OnestepConfig& cfg) {
  const std::size_t J = grid.size();
  jacobians.assign(J, std::nullopt);
  JacobianWorkspace ws;
  // the spread of the residuals barely moves with tau; measure it once
  const double spread = residual_spread(start_residuals, s.w, ws.sorted);

  auto jac_at = [&](std::size_t j, const Vector& r) {
    const double h = bandwidth_from_spread(grid[j], s.n_eff, cfg.alpha, spread);
    JacobianEstimate est = jacobian_from_residuals(s, r, grid[j], h, cfg.ridge, ws);
    require_invertible(est);
    return est;
  };

  jacobians[start] = jac_at(start, start_residuals);
  // M(tau', b) = M(tau, b) + (tau' - tau) * mean(x), so one product per step
  const Vector M_start = weighted_moment(s, start_residuals, grid[start]);

  for (int dir : {+1, -1}) {
    Vector r = start_residuals;
    Vector M = M_start;
    Eigen::LDLT<Matrix> solver(jacobians[start]->J_hat);
    auto j = static_cast<std::ptrdiff_t>(start);
    while (true) {
      const std::ptrdiff_t next = j + dir;
      if (next < 0 || next >= static_cast<std::ptrdiff_t>(J)) break;
      const auto jn = static_cast<std::size_t>(next);
      const auto jc = static_cast<std::size_t>(j);
      M += (grid[jn] - grid[jc]) * s.col_means;
      const Vector step = solver.solve(M);
      QrFit fit;
      fit.tau = grid[jn];
      fit.beta = fits[jc].beta + step;
      fit.engine = Engine::onestep;
      r.noalias() -= *s.X * step;
      fit.objective = weighted_objective(s, r, grid[jn]);
      M = weighted_moment(s, r, grid[jn]);
      fit.moment_inf_norm = M.cwiseAbs().maxCoeff();
      fit.kept = s.X->rows();
      fits[jn] = std::move(fit);
      jacobians[jn] = jac_at(jn, r);
      solver.compute(jacobians[jn]->J_hat);
      j = next;
    }
  }
}

inline std::size_t start_index(const QuantileGrid& grid, std::optional<double> start_tau) {
  if (!start_tau) return grid.nearest(0.5);
  const auto& t = grid.taus();
  for (std::size_t j = 0; j < t.size(); ++j)
    if (std::abs(t[j] - *start_tau) <= 1e-12) return j;
  throw ValidationError("start_tau " + std::to_string(*start_tau) + " is not a grid point");
}

}  // namespace detail

/// Powell kernel estimate (1/(n h)) sum phi(r_i / h) x_i x_i' with h in
/// residual units.
inline JacobianEstimate powell_jacobian(const Dataset& ds, const Vector& beta, double h, double tau = 0.5) {
  if (!(h > 0.0) || !std::isfinite(h)) throw DomainError("powell_jacobian: bandwidth must be positive");
  if (beta.size() != ds.k()) throw ShapeError("powell_jacobian: beta has wrong length");
  const auto s = detail::WeightedSample::of(ds.X(), ds.y());
  const Vector r = ds.y() - ds.X() * beta;
  return detail::jacobian_from_residuals(s, r, tau, h);
}

/// Jacobian at tau with the Hall-Sheather bandwidth converted to residual units.
inline JacobianEstimate estimate_jacobian(const Dataset& ds, double tau, const Vector& beta, double alpha = 0.05) {
  require_tau(tau);
  if (beta.size() != ds.k()) throw ShapeError("estimate_jacobian: beta has wrong length");
  const auto s = detail::WeightedSample::of(ds.X(), ds.y());
  const Vector r = ds.y() - ds.X() * beta;
  const double h = detail::response_bandwidth(tau, s.n_eff, alpha, r, nullptr);
  return detail::jacobian_from_residuals(s, r, tau, h);
}

/// Newton step beta_prev + J^-1 M(tau_next, beta_prev).
inline Vector onestep_update(const Dataset& ds, double tau_next, const Vector& beta_prev, const JacobianEstimate& J) {
  require_tau(tau_next);
  if (beta_prev.size() != ds.k() || J.J_hat.rows() != ds.k()) throw ShapeError("onestep_update: dimension mismatch");
  detail::require_invertible(J);
  const Vector M = moment(ds, tau_next, beta_prev);
  return beta_prev + J.J_hat.ldlt().solve(M);
}

/// dbeta/dtau = J^-1 E(X).
inline Vector beta_derivative(const Dataset& ds, const JacobianEstimate& J) {
  if (J.J_hat.rows() != ds.k()) throw ShapeError("beta_derivative: dimension mismatch");
  detail::require_invertible(J);
  const Vector mean_x = ds.X().colwise().mean().transpose();
  return J.J_hat.ldlt().solve(mean_x);
}

/// One-step coefficient process: an exact fit at start_tau (default: grid
/// point nearest the median), then one Newton update per grid step in each
/// direction. Jacobians at every grid point are attached to the result.
inline CoefProcess fit_process_onestep(const Dataset& ds, const QuantileGrid& grid,
                                       std::optional<double> start_tau = std::nullopt,
                                       const SolverOptions& opts = {}, const OnestepConfig& cfg = {}) {
  opts.validate();
  cfg.validate();
  if (grid.size() == 0) throw ValidationError("fit_process_onestep: empty grid");
  const std::size_t start = detail::start_index(grid, start_tau);
  CoefProcess proc;
  proc.grid = grid;
  proc.fits.resize(grid.size());
  QrFit f0 = fit_single_pk(ds, grid[start], cfg.start, opts);
  f0.tau = grid[start];
  const Vector r0 = ds.y() - ds.X() * f0.beta;
  proc.fits[start] = std::move(f0);
  const auto s = detail::WeightedSample::of(ds.X(), ds.y());
  detail::onestep_march(s, grid, start, proc.fits, r0, proc.jacobians, cfg);
  return proc;
}

/// Fills in missing Jacobians at each fitted coefficient vector.
inline void attach_jacobians(const Dataset& ds, CoefProcess& proc, double alpha = 0.05) {
  proc.jacobians.resize(proc.fits.size());
  for (std::size_t j = 0; j < proc.fits.size(); ++j)
    if (!proc.jacobians[j]) proc.jacobians[j] = estimate_jacobian(ds, proc.fits[j].tau, proc.fits[j].beta, alpha);
}

}  // namespace qrp
