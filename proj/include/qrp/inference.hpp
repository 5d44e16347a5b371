#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qrp/bootstrap.hpp"
#include "qrp/core_model.hpp"
#include "qrp/detail/normal.hpp"
#include "qrp/errors.hpp"
#include "qrp/onestep.hpp"

namespace qrp {

enum class TestKind { pointwise, KS, CvM };

inline std::string to_string(TestKind k) {
  switch (k) {
    case TestKind::pointwise: return "pointwise";
    case TestKind::KS: return "KS";
    case TestKind::CvM: return "CvM";
  }
  return "unknown";
}

inline TestKind test_kind_from_string(std::string_view s) {
  if (s == "KS" || s == "ks") return TestKind::KS;
  if (s == "CvM" || s == "cvm") return TestKind::CvM;
  if (s == "pointwise") return TestKind::pointwise;
  throw ValidationError("unknown test kind '" + std::string(s) + "'");
}

struct TestResult {
  TestKind kind = TestKind::pointwise;
  double statistic = 0.0;
  double critical_value = 0.0;
  double p_value = 1.0;
  double alpha = 0.05;
  std::string null_description;
  std::vector<double> grid;

  bool reject() const { return statistic > critical_value; }
};

struct UniformBands {
  std::vector<double> grid;
  std::vector<Index> coefficients;  // columns of lower/upper
  Matrix estimate;                  // J x |coefficients|
  Matrix lower;
  Matrix upper;
  double alpha = 0.05;
  double critical_value = 0.0;   // uniform multiplier c
  Matrix pointwise_critical;     // per (tau, coefficient) multipliers from the same draws
};

/// (1/n) sum (tau - 1(r_i <= 0)) (tau2 - 1(r2_i <= 0)) x_i x_i'.
inline Matrix sigma_hat(const Dataset& ds, const Vector& beta_tau, const Vector& beta_tau2, double tau, double tau2) {
  require_tau(tau);
  require_tau(tau2);
  if (beta_tau.size() != ds.k() || beta_tau2.size() != ds.k()) throw ShapeError("sigma_hat: beta has wrong length");
  const Vector r1 = ds.y() - ds.X() * beta_tau;
  const Vector r2 = ds.y() - ds.X() * beta_tau2;
  Vector w(ds.n());
  for (Index i = 0; i < ds.n(); ++i) w(i) = (tau - (r1(i) <= 0.0 ? 1.0 : 0.0)) * (tau2 - (r2(i) <= 0.0 ? 1.0 : 0.0));
  Matrix S = ds.X().transpose() * w.asDiagonal() * ds.X() / static_cast<double>(ds.n());
  return 0.5 * (S + S.transpose());
}

/// Sandwich J^-1 Sigma J^-1 (per-observation scale; divide by n for se^2).
inline Matrix pointwise_variance(const JacobianEstimate& J, const Matrix& Sigma) {
  if (J.J_hat.rows() != Sigma.rows() || Sigma.rows() != Sigma.cols())
    throw ShapeError("pointwise_variance: dimension mismatch");
  detail::require_invertible(J);
  const Eigen::LDLT<Matrix> ldlt(J.J_hat);
  const Matrix A = ldlt.solve(Sigma);
  const Matrix V = ldlt.solve(A.transpose());
  return 0.5 * (V + V.transpose());
}

/// J x k matrix of analytic standard errors sqrt(V_jj(tau) / n).
inline Matrix process_standard_errors(const Dataset& ds, const CoefProcess& proc) {
  if (!proc.has_all_jacobians()) throw ValidationError("standard errors need a Jacobian at every grid point");
  Matrix se(static_cast<Index>(proc.size()), ds.k());
  for (std::size_t j = 0; j < proc.size(); ++j) {
    const double tau = proc.fits[j].tau;
    const Matrix S = sigma_hat(ds, proc.fits[j].beta, proc.fits[j].beta, tau, tau);
    const Matrix V = pointwise_variance(*proc.jacobians[j], S);
    se.row(static_cast<Index>(j)) = (V.diagonal().cwiseMax(0.0) / static_cast<double>(ds.n())).cwiseSqrt().transpose();
  }
  return se;
}

/// Two-sided normal test of beta_j = null_value with se_j = sqrt(V_jj / n).
inline TestResult pointwise_test(const QrFit& fit, const Matrix& V, Index n, Index coefficient, double null_value,
                                 double alpha = 0.05) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0,1)");
  if (coefficient < 0 || coefficient >= fit.beta.size() || V.rows() != fit.beta.size())
    throw ShapeError("pointwise_test: coefficient index or variance shape invalid");
  const double se = std::sqrt(std::max(V(coefficient, coefficient), 0.0) / static_cast<double>(n));
  if (!(se > 0.0)) throw DomainError("pointwise_test: zero standard error");
  TestResult t;
  t.kind = TestKind::pointwise;
  t.alpha = alpha;
  t.statistic = std::abs(fit.beta(coefficient) - null_value) / se;
  t.critical_value = detail::norm_quantile(1.0 - alpha / 2.0);
  t.p_value = detail::norm_two_sided_p(t.statistic);
  t.null_description = "beta[" + std::to_string(coefficient) + "](" + std::to_string(fit.tau) +
                       ") = " + std::to_string(null_value);
  t.grid = {fit.tau};
  return t;
}

/// Same test with a bootstrap standard error.
inline TestResult pointwise_test_se(const QrFit& fit, double se, Index coefficient, double null_value,
                                    double alpha = 0.05) {
  if (!(se > 0.0)) throw DomainError("pointwise_test: zero standard error");
  Matrix V = Matrix::Zero(fit.beta.size(), fit.beta.size());
  V(coefficient, coefficient) = se * se;
  return pointwise_test(fit, V, 1, coefficient, null_value, alpha);
}

namespace detail {

/// Order-statistic critical value t_(B-K) with K the largest integer below
/// alpha (B+1) - 1, so that stat > crit exactly when the bootstrap p-value
/// (1 + #{T* >= stat}) / (B + 1) is below alpha.
inline double bootstrap_critical_value(std::vector<double> stats, double alpha) {
  const auto B = static_cast<long>(stats.size());
  if (B == 0) throw ValidationError("no bootstrap statistics");
  double a = alpha * static_cast<double>(B + 1) - 1.0;
  // alpha (B+1) is often an integer in exact arithmetic (0.1 * 20); snap it.
  if (std::abs(a - std::round(a)) < 1e-9) a = std::round(a);
  const long K = static_cast<long>(std::ceil(a)) - 1;
  if (K < 0) return std::numeric_limits<double>::infinity();
  const long pos = std::max(0L, B - K - 1);  // 0-based index of t_(B-K)
  std::nth_element(stats.begin(), stats.begin() + pos, stats.end());
  return stats[static_cast<std::size_t>(pos)];
}

inline double bootstrap_p_value(const std::vector<double>& stats, double observed) {
  const auto ge = std::count_if(stats.begin(), stats.end(), [&](double t) { return t >= observed; });
  return (1.0 + static_cast<double>(ge)) / (static_cast<double>(stats.size()) + 1.0);
}

inline double functional(TestKind kind, const Vector& d) {
  if (kind == TestKind::KS) return d.cwiseAbs().maxCoeff();
  return d.squaredNorm() / static_cast<double>(d.size());
}

inline void check_alignment(const CoefProcess& proc, const BootstrapDraws& draws, const Matrix& se) {
  if (draws.grid.taus() != proc.grid.taus()) throw ValidationError("bootstrap draws and process use different grids");
  if (draws.k != proc.k()) throw ShapeError("bootstrap draws and process differ in k");
  if (se.rows() != static_cast<Index>(proc.size()) || se.cols() != proc.k())
    throw ShapeError("standard error matrix has wrong shape");
}

}  // namespace detail

/// KS or CvM test of beta_j(.) = null(.) over the grid. Deviations are
/// studentised by the sample standard errors `se` (J x k); critical values
/// come from the same functional of the centred bootstrap deviations.
inline TestResult functional_test(const CoefProcess& proc, const BootstrapDraws& draws, const Matrix& se,
                                  Index coefficient, const std::function<double(double)>& null_fn, TestKind kind,
                                  double alpha = 0.05, std::size_t min_replicates = 100) {
  if (kind == TestKind::pointwise) throw ValidationError("functional_test needs KS or CvM");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0,1)");
  detail::check_alignment(proc, draws, se);
  if (coefficient < 0 || coefficient >= proc.k()) throw ShapeError("functional_test: coefficient out of range");
  if (static_cast<std::size_t>(draws.B) < min_replicates)
    throw ValidationError("functional_test needs at least " + std::to_string(min_replicates) + " replicates");
  const auto J = static_cast<Index>(proc.size());
  for (Index j = 0; j < J; ++j)
    if (!(se(j, coefficient) > 0.0))
      throw DomainError("zero standard error at tau = " + std::to_string(proc.grid[static_cast<std::size_t>(j)]));

  Vector d(J);
  for (Index j = 0; j < J; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    d(j) = (proc.fits[jj].beta(coefficient) - null_fn(proc.grid[jj])) / se(j, coefficient);
  }
  std::vector<double> stats(static_cast<std::size_t>(draws.B));
  Vector db(J);
  for (Index b = 0; b < draws.B; ++b) {
    for (Index j = 0; j < J; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      db(j) = (draws.at(b, jj, coefficient) - proc.fits[jj].beta(coefficient)) / se(j, coefficient);
    }
    stats[static_cast<std::size_t>(b)] = detail::functional(kind, db);
  }
  TestResult t;
  t.kind = kind;
  t.alpha = alpha;
  t.statistic = detail::functional(kind, d);
  t.critical_value = detail::bootstrap_critical_value(stats, alpha);
  t.p_value = detail::bootstrap_p_value(stats, t.statistic);
  t.null_description = "functional null on coefficient " + std::to_string(coefficient);
  t.grid = proc.grid.taus();
  return t;
}

/// Uniform bands beta_j(tau) +/- c se_j(tau) with c the bootstrap critical
/// value of the sup over grid and selected coefficients of |beta* - beta| / se.
inline UniformBands uniform_bands(const CoefProcess& proc, const BootstrapDraws& draws, const Matrix& se,
                                  double alpha = 0.05, std::vector<Index> coefficients = {}) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0,1)");
  detail::check_alignment(proc, draws, se);
  if (draws.B < 1) throw ValidationError("uniform_bands: no bootstrap replicates");
  if (coefficients.empty()) {
    coefficients.resize(static_cast<std::size_t>(proc.k()));
    std::iota(coefficients.begin(), coefficients.end(), Index{0});
  }
  const auto J = static_cast<Index>(proc.size());
  const auto m = static_cast<Index>(coefficients.size());
  for (Index c : coefficients) {
    if (c < 0 || c >= proc.k()) throw ShapeError("uniform_bands: coefficient out of range");
    for (Index j = 0; j < J; ++j)
      if (!(se(j, c) > 0.0))
        throw DomainError("zero standard error at tau = " + std::to_string(proc.grid[static_cast<std::size_t>(j)]));
  }
  std::vector<double> sup(static_cast<std::size_t>(draws.B), 0.0);
  std::vector<std::vector<double>> point(static_cast<std::size_t>(J * m),
                                         std::vector<double>(static_cast<std::size_t>(draws.B)));
  for (Index b = 0; b < draws.B; ++b)
    for (Index j = 0; j < J; ++j)
      for (Index q = 0; q < m; ++q) {
        const Index c = coefficients[static_cast<std::size_t>(q)];
        const auto jj = static_cast<std::size_t>(j);
        const double v = std::abs(draws.at(b, jj, c) - proc.fits[jj].beta(c)) / se(j, c);
        sup[static_cast<std::size_t>(b)] = std::max(sup[static_cast<std::size_t>(b)], v);
        point[static_cast<std::size_t>(j * m + q)][static_cast<std::size_t>(b)] = v;
      }
  UniformBands u;
  u.grid = proc.grid.taus();
  u.coefficients = coefficients;
  u.alpha = alpha;
  u.critical_value = detail::bootstrap_critical_value(sup, alpha);
  if (!std::isfinite(u.critical_value))
    throw ValidationError("uniform_bands: too few replicates for level " + std::to_string(alpha));
  u.estimate.resize(J, m);
  u.lower.resize(J, m);
  u.upper.resize(J, m);
  u.pointwise_critical.resize(J, m);
  for (Index j = 0; j < J; ++j)
    for (Index q = 0; q < m; ++q) {
      const Index c = coefficients[static_cast<std::size_t>(q)];
      const double est = proc.fits[static_cast<std::size_t>(j)].beta(c);
      u.estimate(j, q) = est;
      u.lower(j, q) = est - u.critical_value * se(j, c);
      u.upper(j, q) = est + u.critical_value * se(j, c);
      u.pointwise_critical(j, q) = detail::bootstrap_critical_value(point[static_cast<std::size_t>(j * m + q)], alpha);
    }
  return u;
}

}  // namespace qrp
