#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qrp/core_model.hpp"
#include "qrp/errors.hpp"

namespace qrp {

struct SolverOptions {
  double duality_gap_tol = 1e-8;  // relative to the current objective
  int max_iter = 100;
  double step_fraction = 0.99995;
  // Snap the interior-point iterate to the optimal basic solution and verify
  // it with the dual certificate.
  bool polish = true;

  void validate() const {
    if (!(duality_gap_tol > 0.0)) throw DomainError("duality_gap_tol must be positive");
    if (max_iter < 1) throw DomainError("max_iter must be at least 1");
    if (!(step_fraction > 0.0 && step_fraction < 1.0))
      throw DomainError("step_fraction must lie in (0,1)");
  }
};

namespace detail {

struct IpmResult {
  Vector beta;
  Vector dual;  // a in [0,1]^n
  int iterations = 0;
  double gap = 0.0;
  double rel_gap = 0.0;
  bool converged = false;
};

/// Primal-dual interior point (Frisch-Newton, Mehrotra predictor-corrector)
/// on the dual program
///     max y'a  s.t.  X'a = (1-tau) X'1,  0 <= a <= 1.
/// Only the first `scale_rows` rows count towards the objective used to make
/// the duality gap relative; trailing pseudo-rows are excluded.
inline IpmResult frisch_newton(const Matrix& X, const Vector& y, double tau,
                               const SolverOptions& opts, const Vector* warm_start,
                               Index scale_rows) {
  const Index n = X.rows();
  const Index k = X.cols();
  const double beta_frac = opts.step_fraction;

  const Vector b = (1.0 - tau) * X.colwise().sum().transpose();
  Vector x = Vector::Constant(n, 1.0 - tau);
  Vector s = Vector::Constant(n, tau);
  Vector yv(k);

  if (warm_start != nullptr && warm_start->size() == k && warm_start->allFinite()) {
    yv = -*warm_start;
  } else {
    const Matrix XtX = X.transpose() * X;
    yv = -(XtX.ldlt().solve(X.transpose() * y));
  }

  // Dual slacks from the residuals at the starting point: z - w = Xb - y.
  Vector z(n), w(n);
  {
    const Vector sres = X * (-yv) - y;
    const double delta = 1e-6 * std::max(sres.cwiseAbs().mean(), 1e-12 * (1.0 + y.cwiseAbs().mean()));
    for (Index i = 0; i < n; ++i) {
      const double v = sres(i);
      if (std::abs(v) < delta) {
        z(i) = std::max(v, 0.0) + delta;
        w(i) = std::max(-v, 0.0) + delta;
      } else {
        z(i) = std::max(v, 0.0);
        w(i) = std::max(-v, 0.0);
      }
    }
  }

  const double floor_scale =
      std::max(1e-10 * y.head(scale_rows).cwiseAbs().sum(), std::numeric_limits<double>::min());

  Vector d(n), dx(n), ds(n), dz(n), dw(n), dr(n), u(n), tmp(n);
  Vector dy(k), rhs(k);
  Matrix Xs(n, k);
  Matrix ada(k, k);

  auto step_lengths = [&](double& dp, double& dd) {
    dp = std::numeric_limits<double>::infinity();
    dd = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (dx(i) < 0.0) dp = std::min(dp, -x(i) / dx(i));
      if (ds(i) < 0.0) dp = std::min(dp, -s(i) / ds(i));
      if (dz(i) < 0.0) dd = std::min(dd, -z(i) / dz(i));
      if (dw(i) < 0.0) dd = std::min(dd, -w(i) / dw(i));
    }
    dp = std::min(beta_frac * dp, 1.0);
    dd = std::min(beta_frac * dd, 1.0);
  };

  IpmResult res;
  double gap = z.dot(x) + w.dot(s);
  int it = 0;
  while (true) {
    double obj = 0.0;
    for (Index i = 0; i < scale_rows; ++i) obj += rho(tau, w(i) - z(i));
    const double scale = std::max(obj, floor_scale);
    res.rel_gap = gap / scale;
    if (gap <= opts.duality_gap_tol * scale) {
      res.converged = true;
      break;
    }
    if (it >= opts.max_iter || !std::isfinite(gap)) break;
    ++it;

    d = (z.array() / x.array() + w.array() / s.array()).inverse();
    ds = z - w;
    dz = d.cwiseProduct(ds);
    tmp = dz - x;
    rhs.noalias() = X.transpose() * tmp;
    rhs += b;

    Xs = X.array().colwise() * d.array().sqrt();
    ada.setZero();
    ada.selfadjointView<Eigen::Lower>().rankUpdate(Xs.transpose());
    Eigen::LLT<Matrix> llt(ada.selfadjointView<Eigen::Lower>());
    std::optional<Eigen::LDLT<Matrix>> ldlt;
    auto solve = [&](const Vector& v) -> Vector {
      if (llt.info() == Eigen::Success) return llt.solve(v);
      if (!ldlt) ldlt.emplace(Matrix(ada.selfadjointView<Eigen::Lower>()));
      return ldlt->solve(v);
    };

    dy = solve(rhs);
    tmp.noalias() = X * dy;
    ds = tmp - ds;
    dx = d.cwiseProduct(ds);
    ds = -dx;
    dz = -z.cwiseProduct((dx.array() / x.array() + 1.0).matrix());
    dw = -w.cwiseProduct((ds.array() / s.array() + 1.0).matrix());

    double deltap = 0.0, deltad = 0.0;
    step_lengths(deltap, deltad);

    if (std::min(deltap, deltad) < 1.0) {
      // Mehrotra corrector with the adaptive centring parameter.
      double mu = z.dot(x) + w.dot(s);
      const double g = mu + deltap * dx.dot(z) + deltad * dz.dot(x) + deltap * deltad * dx.dot(dz) +
                       deltap * ds.dot(w) + deltad * dw.dot(s) + deltap * deltad * ds.dot(dw);
      mu = mu * std::pow(g / mu, 3) / (2.0 * static_cast<double>(n));
      dr = d.array() * (mu * (s.array().inverse() - x.array().inverse()) +
                        dx.array() * dz.array() / x.array() - ds.array() * dw.array() / s.array());
      Vector rhs2 = rhs;
      rhs2.noalias() += X.transpose() * dr;
      dy = solve(rhs2);
      u.noalias() = X * dy;
      for (Index i = 0; i < n; ++i) {
        const double dxdz = dx(i) * dz(i);
        const double dsdw = ds(i) * dw(i);
        dx(i) = d(i) * (u(i) - z(i) + w(i)) - dr(i);
        ds(i) = -dx(i);
        dz(i) = -z(i) + (mu - z(i) * dx(i) - dxdz) / x(i);
        dw(i) = -w(i) + (mu - w(i) * ds(i) - dsdw) / s(i);
      }
      step_lengths(deltap, deltad);
    }

    x += deltap * dx;
    s += deltap * ds;
    yv += deltad * dy;
    z += deltad * dz;
    w += deltad * dw;
    gap = z.dot(x) + w.dot(s);
  }

  res.beta = -yv;
  res.dual = std::move(x);
  res.iterations = it;
  res.gap = gap;
  return res;
}

struct Vertex {
  Vector beta;
  std::vector<Index> basis;
  bool certified = false;
};

/// Greedily picks k linearly independent rows, in the order given.
inline std::vector<Index> independent_rows(const Matrix& X, const std::vector<Index>& order) {
  const Index k = X.cols();
  std::vector<Index> basis;
  Matrix Q(k, k);
  Index m = 0;
  for (Index i : order) {
    Vector v = X.row(i).transpose();
    const double norm0 = v.norm();
    if (norm0 == 0.0) continue;
    for (int pass = 0; pass < 2; ++pass)  // re-orthogonalise once
      if (m > 0) v -= Q.leftCols(m) * (Q.leftCols(m).transpose() * v);
    const double nv = v.norm();
    if (nv > 1e-9 * norm0) {
      Q.col(m++) = v / nv;
      basis.push_back(i);
      if (m == k) break;
    }
  }
  return basis;
}

/// Dual certificate for the basic solution interpolating `basis`: the
/// multipliers v solving X_h' v = -sum_{i not in h} psi(r_i) x_i must lie in
/// [tau-1, tau]. Returns false when a non-basic residual is (numerically) zero.
inline bool certify_basis(const Matrix& X, const Vector& r, double tau,
                          const std::vector<Index>& basis, double zero_tol) {
  const Index k = X.cols();
  std::vector<char> in_basis(static_cast<std::size_t>(X.rows()), 0);
  for (Index i : basis) in_basis[static_cast<std::size_t>(i)] = 1;
  Vector psi(X.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    if (in_basis[static_cast<std::size_t>(i)]) {
      psi(i) = 0.0;
      continue;
    }
    if (std::abs(r(i)) <= zero_tol) return false;  // degenerate: tie at the vertex
    psi(i) = r(i) < 0.0 ? tau - 1.0 : tau;
  }
  const Vector g = X.transpose() * psi;
  Matrix Xh(k, k);
  for (Index j = 0; j < k; ++j) Xh.row(j) = X.row(basis[static_cast<std::size_t>(j)]);
  const Vector v = Xh.transpose().fullPivLu().solve(-g);
  constexpr double eta = 1e-8;
  for (Index j = 0; j < k; ++j)
    if (!(v(j) >= tau - 1.0 - eta && v(j) <= tau + eta)) return false;
  return true;
}

/// Snaps a near-optimal point to the basic solution through its k smallest
/// residuals among rows [0, candidate_rows).
inline std::optional<Vertex> polish_vertex(const Matrix& X, const Vector& y, double tau,
                                           const Vector& beta, Index candidate_rows) {
  const Index k = X.cols();
  const Vector r = y - X * beta;
  std::vector<Index> order(static_cast<std::size_t>(candidate_rows));
  std::iota(order.begin(), order.end(), Index{0});
  auto by_abs = [&](Index a, Index b) { return std::abs(r(a)) < std::abs(r(b)); };
  const auto head = std::min<std::size_t>(order.size(), static_cast<std::size_t>(4 * k + 4));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(head), order.end(), by_abs);
  std::vector<Index> front(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(head));
  std::vector<Index> basis = independent_rows(X, front);
  if (static_cast<Index>(basis.size()) < k) {
    std::sort(order.begin(), order.end(), by_abs);
    basis = independent_rows(X, order);
    if (static_cast<Index>(basis.size()) < k) return std::nullopt;
  }
  Matrix Xh(k, k);
  Vector yh(k);
  for (Index j = 0; j < k; ++j) {
    Xh.row(j) = X.row(basis[static_cast<std::size_t>(j)]);
    yh(j) = y(basis[static_cast<std::size_t>(j)]);
  }
  Vertex v;
  v.beta = Xh.fullPivLu().solve(yh);
  if (!v.beta.allFinite()) return std::nullopt;
  Vector rv = y - X * v.beta;
  for (Index i : basis) rv(i) = 0.0;
  const double zero_tol = 1e-12 * (1.0 + y.cwiseAbs().maxCoeff());
  v.certified = certify_basis(X, rv, tau, basis, zero_tol);
  v.basis = std::move(basis);
  return v;
}

inline QrFit finish_fit(const Matrix& X, const Vector& y, double tau, Vector beta, Engine engine,
                        int iterations) {
  QrFit fit;
  fit.tau = tau;
  const Vector r = y - X * beta;
  fit.objective = sum_rho(tau, r);
  fit.moment_inf_norm = moment_from_residuals(X, r, tau).cwiseAbs().maxCoeff();
  fit.beta = std::move(beta);
  fit.engine = engine;
  fit.iterations = iterations;
  fit.kept = X.rows();
  return fit;
}

/// Interior point followed by the optional vertex polish. `scale_rows` rows
/// are genuine observations; any trailing rows are pseudo-observations that
/// never enter the basis.
inline QrFit solve_rows(const Matrix& X, const Vector& y, double tau, const SolverOptions& opts,
                        const Vector* warm_start, Index scale_rows, Engine engine) {
  IpmResult ipm = frisch_newton(X, y, tau, opts, warm_start, scale_rows);
  if (!ipm.beta.allFinite())
    throw ConvergenceError("interior point produced a non-finite iterate", ipm.beta, ipm.gap);
  if (opts.polish) {
    if (auto v = polish_vertex(X, y, tau, ipm.beta, scale_rows)) {
      const bool accept = v->certified || (ipm.converged && [&] {
        const double obj_v = sum_rho(tau, Vector(y - X * v->beta));
        const double obj_i = sum_rho(tau, Vector(y - X * ipm.beta));
        return obj_v <= obj_i * (1.0 + 1e-12) + 1e-300;
      }());
      if (accept) {
        QrFit fit = finish_fit(X, y, tau, std::move(v->beta), engine, ipm.iterations);
        fit.certified = v->certified;
        return fit;
      }
    }
  }
  if (!ipm.converged)
    throw ConvergenceError("interior point did not reach the duality gap tolerance in " +
                               std::to_string(opts.max_iter) + " iterations (relative gap " +
                               std::to_string(ipm.rel_gap) + ")",
                           ipm.beta, ipm.gap);
  return finish_fit(X, y, tau, std::move(ipm.beta), engine, ipm.iterations);
}

}  // namespace detail

/// Exact quantile regression fit minimising sum rho_tau(y - X b).
inline QrFit solve_qr(const Matrix& X, const Vector& y, double tau, const SolverOptions& opts = {},
                      const std::optional<Vector>& warm_start = std::nullopt) {
  require_tau(tau);
  opts.validate();
  if (X.rows() != y.size()) throw ShapeError("solve_qr: X and y row counts differ");
  if (X.rows() < X.cols()) throw SizeError("solve_qr: fewer rows than columns");
  if (warm_start && warm_start->size() != X.cols()) throw ShapeError("solve_qr: warm start has wrong length");
  return detail::solve_rows(X, y, tau, opts, warm_start ? &*warm_start : nullptr, X.rows(),
                            Engine::baseline);
}

inline QrFit solve_qr(const Dataset& ds, double tau, const SolverOptions& opts = {},
                      const std::optional<Vector>& warm_start = std::nullopt) {
  return solve_qr(ds.X(), ds.y(), tau, opts, warm_start);
}

// ---------------------------------------------------------------------------
// Brute-force oracle

inline constexpr Index kBruteForceMaxRows = 30;
inline constexpr Index kBruteForceMaxCols = 4;

/// Enumerates every k-subset of rows with an invertible sub-matrix and keeps
/// the interpolating solution with the smallest objective. Ties go to the
/// lexicographically lowest row set.
inline QrFit solve_qr_bruteforce(const Matrix& X, const Vector& y, double tau) {
  require_tau(tau);
  const Index n = X.rows();
  const Index k = X.cols();
  if (n != y.size()) throw ShapeError("solve_qr_bruteforce: X and y row counts differ");
  if (n > kBruteForceMaxRows || k > kBruteForceMaxCols)
    throw SizeError("solve_qr_bruteforce is limited to n <= 30 and k <= 4");
  if (n < k) throw SizeError("solve_qr_bruteforce: fewer rows than columns");

  std::vector<Index> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  Vector best_beta;
  Matrix Xh(k, k);
  Vector yh(k);
  while (true) {
    for (Index j = 0; j < k; ++j) {
      Xh.row(j) = X.row(idx[static_cast<std::size_t>(j)]);
      yh(j) = y(idx[static_cast<std::size_t>(j)]);
    }
    Eigen::FullPivLU<Matrix> lu(Xh);
    lu.setThreshold(1e-12);
    if (lu.rank() == k) {
      const Vector b = lu.solve(yh);
      const double obj = detail::sum_rho(tau, Vector(y - X * b));
      if (obj < best - 1e-12 * (1.0 + std::abs(best == std::numeric_limits<double>::infinity() ? 0.0 : best))) {
        best = obj;
        best_beta = b;
      }
    }
    // next combination in lexicographic order
    Index j = k - 1;
    while (j >= 0 && idx[static_cast<std::size_t>(j)] == n - k + j) --j;
    if (j < 0) break;
    ++idx[static_cast<std::size_t>(j)];
    for (Index m = j + 1; m < k; ++m) idx[static_cast<std::size_t>(m)] = idx[static_cast<std::size_t>(m - 1)] + 1;
  }
  if (best_beta.size() == 0) throw RankError("solve_qr_bruteforce: no invertible k-subset");
  QrFit fit = detail::finish_fit(X, y, tau, std::move(best_beta), Engine::baseline, 0);
  fit.certified = true;
  return fit;
}

inline QrFit solve_qr_bruteforce(const Dataset& ds, double tau) {
  return solve_qr_bruteforce(ds.X(), ds.y(), tau);
}

// ---------------------------------------------------------------------------
// Globbed problem: kept rows plus two pseudo-observations standing in for
// rows whose residual sign is known.

struct GlobRow {
  Vector x;                    // sum of member rows (weighted)
  double y = 0.0;              // pseudo response
  std::vector<Index> members;  // original row indices
};

struct GlobbedProblem {
  Matrix X_kept;  // kept rows, already multiplied by their weights
  Vector y_kept;
  std::vector<Index> kept;  // original row indices
  std::optional<GlobRow> low;   // residual forced negative
  std::optional<GlobRow> high;  // residual forced positive
  double represented = 0.0;     // total weight of the original rows
};

/// Scale statistics of the full sample used to place the pseudo responses.
struct GlobScale {
  double y_range = 1.0;
  double mean_row_norm = 1.0;

  static GlobScale of(const Matrix& X, const Vector& y) {
    GlobScale g;
    g.y_range = std::max({y.maxCoeff() - y.minCoeff(), y.cwiseAbs().maxCoeff(), 1e-300});
    g.mean_row_norm = std::max(X.rowwise().norm().mean(), 1e-300);
    return g;
  }
};

/// Builds the globbed problem. `weights` (optional) are row multiplicities;
/// weighted rows enter as w_i * (x_i, y_i) since the check loss is positively
/// homogeneous. Pseudo responses: y_L = x_L'b - c, y_H = x_H'b + c with
/// c = 1e3 * range(y) * max(1, ||x_G|| / mean row norm).
inline GlobbedProblem make_globbed(const Matrix& X, const Vector& y, const std::vector<Index>& kept,
                                   const std::vector<Index>& J_L, const std::vector<Index>& J_H,
                                   const Vector& prelim_beta, const GlobScale& scale,
                                   const Vector* weights = nullptr) {
  const Index k = X.cols();
  if (prelim_beta.size() != k) throw ShapeError("make_globbed: preliminary beta has wrong length");
  GlobbedProblem gp;
  gp.kept = kept;
  gp.X_kept.resize(static_cast<Index>(kept.size()), k);
  gp.y_kept.resize(static_cast<Index>(kept.size()));
  for (std::size_t m = 0; m < kept.size(); ++m) {
    const Index i = kept[m];
    const double wi = weights ? (*weights)(i) : 1.0;
    gp.X_kept.row(static_cast<Index>(m)) = wi * X.row(i);
    gp.y_kept(static_cast<Index>(m)) = wi * y(i);
    gp.represented += wi;
  }
  auto glob = [&](const std::vector<Index>& members, double sign) -> std::optional<GlobRow> {
    if (members.empty()) return std::nullopt;
    GlobRow g;
    g.x = Vector::Zero(k);
    for (Index i : members) {
      const double wi = weights ? (*weights)(i) : 1.0;
      g.x += wi * X.row(i).transpose();
      gp.represented += wi;
    }
    const double c = 1e3 * scale.y_range * std::max(1.0, g.x.norm() / scale.mean_row_norm);
    g.y = g.x.dot(prelim_beta) + sign * c;
    g.members = members;
    return g;
  };
  gp.low = glob(J_L, -1.0);
  gp.high = glob(J_H, +1.0);
  return gp;
}

namespace detail {
inline void stack_globbed(const GlobbedProblem& gp, Matrix& X, Vector& y) {
  const Index m = gp.X_kept.rows();
  const Index extra = (gp.low ? 1 : 0) + (gp.high ? 1 : 0);
  X.resize(m + extra, gp.X_kept.cols());
  y.resize(m + extra);
  X.topRows(m) = gp.X_kept;
  y.head(m) = gp.y_kept;
  Index row = m;
  for (const auto* g : {&gp.low, &gp.high}) {
    if (!*g) continue;
    X.row(row) = (*g)->x.transpose();
    y(row) = (*g)->y;
    ++row;
  }
}
}  // namespace detail

/// Exact minimiser of the globbed problem. The reported moment is normalised
/// by the number of represented observations, so it equals the full-data
/// moment whenever every glob member keeps its residual sign.
inline QrFit solve_globbed(const GlobbedProblem& gp, double tau, const SolverOptions& opts = {},
                           const std::optional<Vector>& warm_start = std::nullopt) {
  require_tau(tau);
  opts.validate();
  const Index k = gp.X_kept.cols();
  if (gp.X_kept.rows() < k) throw SizeError("solve_globbed: fewer kept rows than columns");
  Matrix X;
  Vector y;
  detail::stack_globbed(gp, X, y);
  QrFit fit = detail::solve_rows(X, y, tau, opts, warm_start ? &*warm_start : nullptr,
                                 gp.X_kept.rows(), Engine::globbed);
  const Vector r = y - X * fit.beta;
  Vector psi(r.size());
  for (Index i = 0; i < r.size(); ++i) psi(i) = tau - (r(i) <= 0.0 ? 1.0 : 0.0);
  const double denom = gp.represented > 0.0 ? gp.represented : static_cast<double>(r.size());
  fit.moment_inf_norm = (X.transpose() * psi / denom).cwiseAbs().maxCoeff();
  fit.kept = gp.X_kept.rows();
  return fit;
}

}  // namespace qrp
