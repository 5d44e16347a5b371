#pragma once

#include <cmath>
#include <random>

#include "qrp/core_model.hpp"
#include "qrp/rng.hpp"

namespace qrp::support {

/// Intercept plus k-1 standard normal covariates, heavy-ish tailed errors.
inline Dataset random_dataset(Index n, Index k, std::uint64_t seed) {
  Engine64 rng(seed);
  std::normal_distribution<double> z;
  std::student_t_distribution<double> t(4.0);
  for (;;) {
    Matrix X(n, k);
    Vector y(n);
    for (Index i = 0; i < n; ++i) {
      X(i, 0) = 1.0;
      for (Index c = 1; c < k; ++c) X(i, c) = z(rng);
      y(i) = X.row(i).sum() + (1.0 + 0.3 * std::abs(k > 1 ? X(i, 1) : 0.0)) * t(rng);
    }
    if (has_full_column_rank(X)) return Dataset::create(std::move(X), std::move(y));
  }
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

inline double max_rel_diff(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, rel_diff(a(i), b(i)));
  return m;
}

/// Coefficients agree within tol, or the objectives agree within obj_tol
/// (non-unique optimum).
inline bool same_solution(const Dataset& ds, double tau, const Vector& a, const Vector& b, double tol = 1e-6,
                          double obj_tol = 1e-9) {
  if (max_rel_diff(a, b) <= tol) return true;
  const double oa = objective(ds, tau, a);
  const double ob = objective(ds, tau, b);
  return std::abs(oa - ob) <= obj_tol * std::max(1.0, std::abs(ob));
}

}  // namespace qrp::support
