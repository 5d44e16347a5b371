#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <Eigen/Dense>

#include "qrp/bootstrap.hpp"
#include "qrp/core_model.hpp"
#include "qrp/detail/normal.hpp"
#include "qrp/detail/parallel.hpp"
#include "qrp/inference.hpp"
#include "qrp/onestep.hpp"
#include "qrp/preprocess.hpp"
#include "qrp/rng.hpp"
#include "qrp/solver.hpp"

namespace qrp {

// ---------------------------------------------------------------------------
// Designs

enum class DesignKind { hagemann, location_scale };

/// A data-generating process with analytically known quantile coefficients.
struct Design {
  DesignKind kind = DesignKind::hagemann;
  Index k = 3;
  // location-scale: y = x'gamma + (x'delta) u, u ~ N(0,1)
  Vector gamma;
  Vector delta;
  std::vector<std::string> names;

  /// y = x + (0.1 + x^2) u with x ~ N(0,1), u ~ N(0,1/3); regressors [1, x, x^2].
  static Design hagemann() { return {}; }

  /// Wage-regression layout: intercept, years of schooling, a quartic in
  /// experience, four demographic indicators, four schooling categories and
  /// regional indicators, then rarer industry indicators for k > 20. The
  /// scale loads only on nonnegative covariates, so it stays above 0.35.
  static Design location_scale(Index k, bool heteroskedastic = true) {
    if (k < 2) throw DomainError("location-scale design needs k >= 2");
    struct Col {
      const char* name;
      double gamma;
      double delta;
    };
    static const Col base[] = {
        {"(Intercept)", 1.5, 0.35}, {"educ", 0.06, 0.01},      {"exper", 0.045, 0.003},  {"exper2", -0.09, 0.0},
        {"exper3", 0.005, 0.0},     {"exper4", 0.0, 0.0},       {"female", -0.2, 0.05},   {"married", 0.08, 0.0},
        {"nonwhite", -0.1, 0.0},    {"parttime", -0.3, 0.15},   {"hs", 0.1, 0.0},         {"somecol", 0.15, 0.0},
        {"college", 0.3, 0.02},     {"advanced", 0.4, 0.04},    {"region1", 0.05, 0.0},   {"region2", -0.05, 0.0},
        {"region3", 0.05, 0.0},     {"region4", -0.05, 0.0},    {"region5", 0.05, 0.0},   {"region6", -0.05, 0.0},
        {"region7", 0.05, 0.0},     {"region8", -0.05, 0.0}};
    constexpr Index nbase = static_cast<Index>(std::size(base));
    Design d;
    d.kind = DesignKind::location_scale;
    d.k = k;
    d.gamma = Vector::Zero(k);
    d.delta = Vector::Zero(k);
    for (Index j = 0; j < k; ++j) {
      if (j < nbase) {
        d.names.emplace_back(base[j].name);
        d.gamma(j) = base[j].gamma;
        d.delta(j) = base[j].delta;
      } else {
        d.names.push_back("industry" + std::to_string(j - nbase + 1));
        d.gamma(j) = (j % 2) ? 0.03 : -0.03;
      }
    }
    if (!heteroskedastic) {
      d.delta.setZero();
      d.delta(0) = 0.5;
    }
    return d;
  }

  std::string name() const { return kind == DesignKind::hagemann ? "hagemann" : "location_scale"; }

  /// True beta(tau).
  Vector truth(double tau) const {
    require_tau(tau);
    const double q = detail::norm_quantile(tau);
    if (kind == DesignKind::hagemann) {
      const double s = 1.0 / std::sqrt(3.0);
      Vector b(3);
      b << 0.1 * q * s, 1.0, q * s;
      return b;
    }
    return gamma + q * delta;
  }

  Dataset draw(Index n, Engine64& rng) const {
    if (n < 1) throw DomainError("design: n must be positive");
    boost::random::normal_distribution<double> N;
    if (kind == DesignKind::hagemann) {
      Matrix X(n, 3);
      Vector y(n);
      const double su = 1.0 / std::sqrt(3.0);
      for (Index i = 0; i < n; ++i) {
        const double x = N(rng);
        const double u = su * N(rng);
        X(i, 0) = 1.0;
        X(i, 1) = x;
        X(i, 2) = x * x;
        y(i) = x + (0.1 + x * x) * u;
      }
      return Dataset::unchecked(std::move(X), std::move(y), {"(Intercept)", "x", "x2"});
    }
    boost::random::uniform_01<double> U;
    static constexpr double kSchool[] = {0.10, 0.30, 0.27, 0.22, 0.11};
    static constexpr double kYears[] = {10.0, 12.0, 14.0, 16.0, 18.0};
    static constexpr double kRegion[] = {0.19, 0.05, 0.13, 0.16, 0.07, 0.06, 0.12, 0.07, 0.15};
    static constexpr double kIndustry[] = {0.08, 0.05, 0.03, 0.02};
    auto category = [&](const double* p, int m) {
      double u = U(rng);
      for (int c = 0; c < m - 1; ++c) {
        if (u < p[c]) return c;
        u -= p[c];
      }
      return m - 1;
    };
    std::vector<double> rec;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Matrix X(n, k);
      Vector y(n);
      for (Index i = 0; i < n; ++i) {
        const int school = category(kSchool, 5);
        const double educ = kYears[school] + std::floor(3.0 * U(rng)) - 1.0;
        const double e = 40.0 * U(rng);
        const int region = category(kRegion, 9);
        rec = {1.0,
               educ,
               e,
               e * e / 100.0,
               e * e * e / 1000.0,
               e * e * e * e / 10000.0,
               U(rng) < 0.48 ? 1.0 : 0.0,
               U(rng) < 0.55 ? 1.0 : 0.0,
               U(rng) < 0.20 ? 1.0 : 0.0,
               U(rng) < 0.17 ? 1.0 : 0.0};
        for (int c = 1; c < 5; ++c) rec.push_back(school == c ? 1.0 : 0.0);
        for (int c = 1; c < 9; ++c) rec.push_back(region == c ? 1.0 : 0.0);
        for (Index j = 0; j < k; ++j)
          X(i, j) = j < static_cast<Index>(rec.size())
                        ? rec[static_cast<std::size_t>(j)]
                        : (U(rng) < kIndustry[(j - static_cast<Index>(rec.size())) % 4] ? 1.0 : 0.0);
        y(i) = X.row(i).dot(gamma) + X.row(i).dot(delta) * N(rng);
      }
      if (n > k && has_full_column_rank(X)) return Dataset::unchecked(std::move(X), std::move(y), names);
    }
    throw RankError("location-scale design: no full-rank draw at n = " + std::to_string(n));
  }
};

inline Dataset dgp_hagemann(Index n, Engine64& rng) { return Design::hagemann().draw(n, rng); }

inline Dataset dgp_location_scale(Index n, Index k, Engine64& rng) {
  return Design::location_scale(k).draw(n, rng);
}

// ---------------------------------------------------------------------------
// One-step convergence

/// A one-step process counts as converged when the moment condition holds
/// at every grid point up to the slack k max|x_j| / n an exact fit may
/// leave plus sampling noise: the excess, scaled by its standard deviation
/// sqrt(tau (1 - tau) (X'X/n)_jj / n), must stay below the two-sided normal
/// quantile at level alpha / (J k).
inline bool onestep_converged(const Dataset& ds, const CoefProcess& proc, double alpha = 0.05) {
  const Matrix& X = ds.X();
  const auto n = static_cast<double>(ds.n());
  const Index k = ds.k();
  const Vector slack = static_cast<double>(k) * X.cwiseAbs().colwise().maxCoeff().transpose() / n;
  const Vector gram = X.colwise().squaredNorm().transpose() / n;
  const double crit =
      detail::norm_quantile(1.0 - alpha / (2.0 * static_cast<double>(proc.size()) * static_cast<double>(k)));
  for (const QrFit& f : proc.fits) {
    if (!f.beta.allFinite()) return false;
    const Vector M = moment(ds, f.tau, f.beta);
    for (Index j = 0; j < k; ++j) {
      const double excess = std::max(0.0, std::abs(M(j)) - slack(j));
      const double sd = std::sqrt(f.tau * (1.0 - f.tau) * gram(j) / n);
      if (excess > crit * sd) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Relative accuracy of the one-step process

struct AccuracyMeasures {
  double squared_bias = 0.0;
  double variance = 0.0;
  double mse = 0.0;
  double median_bias = 0.0;  // |median error|
  double mad = 0.0;          // median absolute deviation around the median
  double mae = 0.0;          // median absolute error around the truth
};

struct AccuracyReport {
  std::string design;
  Index n = 0;
  Index k = 0;
  Index replications = 0;
  std::uint64_t seed = 0;
  std::vector<double> grid;
  Index converged = 0;
  double convergence_rate = 0.0;
  AccuracyMeasures qr;       // averages over grid and coefficients
  AccuracyMeasures onestep;
  double relative_mse = 0.0;  // average over parameters of the ratio
  double relative_mae = 0.0;
  std::vector<double> relative_mae_by_tau;  // averaged over coefficients
  double seconds = 0.0;
};

namespace detail {
inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m), v.end());
  const double hi = v[m];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m));
  return 0.5 * (lo + hi);
}

inline AccuracyMeasures measures(const std::vector<double>& err) {
  AccuracyMeasures m;
  const auto R = static_cast<double>(err.size());
  double mean = 0.0;
  for (double e : err) mean += e;
  mean /= R;
  double var = 0.0, mse = 0.0;
  for (double e : err) {
    var += (e - mean) * (e - mean);
    mse += e * e;
  }
  m.squared_bias = mean * mean;
  m.variance = var / R;
  m.mse = mse / R;
  const double med = median_of(err);
  m.median_bias = std::abs(med);
  std::vector<double> dev(err.size()), abs_err(err.size());
  for (std::size_t i = 0; i < err.size(); ++i) {
    dev[i] = std::abs(err[i] - med);
    abs_err[i] = std::abs(err[i]);
  }
  m.mad = median_of(dev);
  m.mae = median_of(abs_err);
  return m;
}
}  // namespace detail

/// Monte Carlo comparison of the one-step process with exact fits. Measures
/// use the replications where the one-step process converged.
inline AccuracyReport mc_relative_accuracy(const Design& design, Index n, const QuantileGrid& grid, Index R,
                                           std::uint64_t seed, int workers = 0,
                                           std::optional<double> start_tau = std::nullopt) {
  if (R < 1) throw DomainError("mc_relative_accuracy: R must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t J = grid.size();
  const Index k = design.k;
  const std::size_t P = J * static_cast<std::size_t>(k);
  std::vector<double> err_qr(static_cast<std::size_t>(R) * P), err_one(static_cast<std::size_t>(R) * P);
  std::vector<char> ok(static_cast<std::size_t>(R), 0);
  std::vector<Vector> truth(J);
  for (std::size_t j = 0; j < J; ++j) truth[j] = design.truth(grid[j]);

  detail::parallel_for(static_cast<std::size_t>(R), detail::resolve_workers(workers), [&](std::size_t r) {
    Engine64 rng = make_stream(seed, r);
    const Dataset ds = design.draw(n, rng);
    const CoefProcess exact = fit_process_preprocess(ds, grid);
    std::optional<CoefProcess> one;
    try {
      one = fit_process_onestep(ds, grid, start_tau);
    } catch (const NumericalError&) {
    }
    ok[r] = one && onestep_converged(ds, *one) ? 1 : 0;
    for (std::size_t j = 0; j < J; ++j)
      for (Index c = 0; c < k; ++c) {
        const std::size_t at = r * P + j * static_cast<std::size_t>(k) + static_cast<std::size_t>(c);
        err_qr[at] = exact.fits[j].beta(c) - truth[j](c);
        err_one[at] = one ? one->fits[j].beta(c) - truth[j](c) : 0.0;
      }
  });

  AccuracyReport rep;
  rep.design = design.name();
  rep.n = n;
  rep.k = k;
  rep.replications = R;
  rep.seed = seed;
  rep.grid = grid.taus();
  rep.converged = std::count(ok.begin(), ok.end(), 1);
  rep.convergence_rate = static_cast<double>(rep.converged) / static_cast<double>(R);
  rep.relative_mae_by_tau.assign(J, 0.0);
  if (rep.converged == 0) return rep;

  std::vector<double> a(static_cast<std::size_t>(rep.converged)), b(a.size());
  auto add = [](AccuracyMeasures& acc, const AccuracyMeasures& m) {
    acc.squared_bias += m.squared_bias;
    acc.variance += m.variance;
    acc.mse += m.mse;
    acc.median_bias += m.median_bias;
    acc.mad += m.mad;
    acc.mae += m.mae;
  };
  for (std::size_t j = 0; j < J; ++j)
    for (Index c = 0; c < k; ++c) {
      std::size_t t = 0;
      for (Index r = 0; r < R; ++r) {
        if (!ok[static_cast<std::size_t>(r)]) continue;
        const std::size_t at = static_cast<std::size_t>(r) * P + j * static_cast<std::size_t>(k) + static_cast<std::size_t>(c);
        a[t] = err_qr[at];
        b[t] = err_one[at];
        ++t;
      }
      const auto mq = detail::measures(a);
      const auto mo = detail::measures(b);
      add(rep.qr, mq);
      add(rep.onestep, mo);
      const double rmae = mq.mae > 0.0 ? mo.mae / mq.mae : 1.0;
      rep.relative_mae += rmae;
      rep.relative_mse += mq.mse > 0.0 ? mo.mse / mq.mse : 1.0;
      rep.relative_mae_by_tau[j] += rmae / static_cast<double>(k);
    }
  const auto np = static_cast<double>(P);
  for (auto* m : {&rep.qr, &rep.onestep}) {
    m->squared_bias /= np;
    m->variance /= np;
    m->mse /= np;
    m->median_bias /= np;
    m->mad /= np;
    m->mae /= np;
  }
  rep.relative_mae /= np;
  rep.relative_mse /= np;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Size and power

enum class InferenceMethod { kernel, empirical, empirical_onestep, score, score_onestep };

inline std::string to_string(InferenceMethod m) {
  switch (m) {
    case InferenceMethod::kernel: return "kernel";
    case InferenceMethod::empirical: return "empirical";
    case InferenceMethod::empirical_onestep: return "empirical-onestep";
    case InferenceMethod::score: return "score";
    case InferenceMethod::score_onestep: return "score-onestep";
  }
  return "unknown";
}

inline InferenceMethod inference_method_from_string(std::string_view s) {
  for (auto m : {InferenceMethod::kernel, InferenceMethod::empirical, InferenceMethod::empirical_onestep,
                 InferenceMethod::score, InferenceMethod::score_onestep})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown inference method '" + std::string(s) + "'");
}

struct RejectionRate {
  std::string label;
  double size = 0.0;
  double size_se = 0.0;
  double power = 0.0;
  double power_se = 0.0;
  Index trials = 0;  // replications that produced a test
};

struct SizePowerReport {
  std::string design;
  std::string test;  // pointwise / KS / CvM
  Index n = 0;
  Index replications = 0;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  std::vector<double> taus;
  std::vector<RejectionRate> rates;
  double seconds = 0.0;
};

struct PointwiseStudy {
  double tau = 0.5;
  Index coefficient = 2;      // x^2 in the Hagemann design
  double false_null_shift = 0.4;  // false null: truth + shift
  double alpha = 0.05;
  Index B_empirical = 100;
  Index B_score = 250;
  WeightScheme scheme = WeightScheme::gaussian;
  double onestep_start = 0.5;
  double onestep_step = 0.01;
  std::vector<InferenceMethod> methods{InferenceMethod::kernel, InferenceMethod::empirical, InferenceMethod::score};
};

namespace detail {
inline RejectionRate summarise(std::string label, Index rejects_true, Index rejects_false, Index trials) {
  RejectionRate r;
  r.label = std::move(label);
  r.trials = trials;
  if (trials == 0) return r;
  const auto T = static_cast<double>(trials);
  r.size = static_cast<double>(rejects_true) / T;
  r.power = static_cast<double>(rejects_false) / T;
  r.size_se = std::sqrt(r.size * (1.0 - r.size) / T);
  r.power_se = std::sqrt(r.power * (1.0 - r.power) / T);
  return r;
}

inline QuantileGrid march_grid(double start, double target, double step) {
  if (std::abs(target - start) < 1e-12) return QuantileGrid({start});
  const double lo = std::min(start, target);
  const double hi = std::max(start, target);
  return QuantileGrid::range(lo, hi, step);
}
}  // namespace detail

/// Rejection rates of two-sided pointwise tests on one coefficient: the true
/// null (analytic truth) and a false null (truth + shift).
inline SizePowerReport mc_size_power(const Design& design, Index n, const PointwiseStudy& st, Index R,
                                     std::uint64_t seed, int workers = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  const Index M = static_cast<Index>(st.methods.size());
  const double truth = design.truth(st.tau)(st.coefficient);
  std::vector<signed char> rej_true(static_cast<std::size_t>(R * M), -1), rej_false(rej_true.size(), -1);
  const QuantileGrid single({st.tau});
  const QuantileGrid march = detail::march_grid(st.onestep_start, st.tau, st.onestep_step);
  const std::size_t target = march.nearest(st.tau);

  detail::parallel_for(static_cast<std::size_t>(R), detail::resolve_workers(workers), [&](std::size_t r) {
    Engine64 rng = make_stream(seed, r);
    const Dataset ds = design.draw(n, rng);
    const std::uint64_t boot_seed = stream_seed(seed ^ 0xb0075eedULL, r);
    std::optional<CoefProcess> exact;
    std::optional<CoefProcess> one;
    auto get_exact = [&]() -> CoefProcess& {
      if (!exact) {
        exact = fit_process_preprocess(ds, single);
        attach_jacobians(ds, *exact, st.alpha);
      }
      return *exact;
    };
    auto get_one = [&]() -> CoefProcess& {
      if (!one) one = fit_process_onestep(ds, march, st.onestep_start);
      return *one;
    };
    for (Index m = 0; m < M; ++m) {
      try {
        QrFit fit;
        double se = 0.0;
        BootstrapConfig bc;
        bc.seed = boot_seed;
        bc.workers = 1;
        bc.scheme = st.scheme;
        switch (st.methods[static_cast<std::size_t>(m)]) {
          case InferenceMethod::kernel: {
            auto& p = get_exact();
            fit = p.fits[0];
            se = process_standard_errors(ds, p)(0, st.coefficient);
            break;
          }
          case InferenceMethod::empirical: {
            auto& p = get_exact();
            fit = p.fits[0];
            bc.B = st.B_empirical;
            se = bootstrap_qr_preprocessed(ds, p, bc).standard_deviations()(0, st.coefficient);
            break;
          }
          case InferenceMethod::score: {
            auto& p = get_exact();
            fit = p.fits[0];
            bc.B = st.B_score;
            se = score_multiplier_bootstrap(ds, p, bc).standard_deviations()(0, st.coefficient);
            break;
          }
          case InferenceMethod::empirical_onestep: {
            auto& p = get_one();
            fit = p.fits[target];
            bc.B = st.B_empirical;
            const auto d = bootstrap_onestep(ds, p, bc, st.onestep_start);
            se = d.standard_deviations()(static_cast<Index>(target), st.coefficient);
            break;
          }
          case InferenceMethod::score_onestep: {
            auto& p = get_one();
            fit = p.fits[target];
            bc.B = st.B_score;
            se = score_multiplier_bootstrap(ds, p, bc).standard_deviations()(static_cast<Index>(target),
                                                                              st.coefficient);
            break;
          }
        }
        const auto at = static_cast<std::size_t>(static_cast<Index>(r) * M + m);
        rej_true[at] = pointwise_test_se(fit, se, st.coefficient, truth, st.alpha).reject() ? 1 : 0;
        rej_false[at] =
            pointwise_test_se(fit, se, st.coefficient, truth + st.false_null_shift, st.alpha).reject() ? 1 : 0;
      } catch (const Error&) {
        // counted as a missing trial
      }
    }
  });

  SizePowerReport rep;
  rep.design = design.name();
  rep.test = "pointwise";
  rep.n = n;
  rep.replications = R;
  rep.seed = seed;
  rep.alpha = st.alpha;
  rep.taus = {st.tau};
  for (Index m = 0; m < M; ++m) {
    Index t = 0, a = 0, b = 0;
    for (Index r = 0; r < R; ++r) {
      const auto at = static_cast<std::size_t>(r * M + m);
      if (rej_true[at] < 0) continue;
      ++t;
      a += rej_true[at];
      b += rej_false[at];
    }
    rep.rates.push_back(detail::summarise(to_string(st.methods[static_cast<std::size_t>(m)]), a, b, t));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

enum class FunctionalMethod { empirical, empirical_onestep, multiplier, multiplier_onestep };

inline std::string to_string(FunctionalMethod m) {
  switch (m) {
    case FunctionalMethod::empirical: return "empirical";
    case FunctionalMethod::empirical_onestep: return "empirical-onestep";
    case FunctionalMethod::multiplier: return "multiplier";
    case FunctionalMethod::multiplier_onestep: return "multiplier-onestep";
  }
  return "unknown";
}

struct FunctionalStudy {
  QuantileGrid grid = QuantileGrid::range(0.1, 0.9, 0.01);
  Index true_coefficient = 1;   // x slope, uniformly 1
  Index false_coefficient = 2;  // x^2 slope, tested against 0
  double false_value = 0.0;
  double alpha = 0.05;
  Index B = 250;
  WeightScheme scheme = WeightScheme::gaussian;
  std::vector<FunctionalMethod> methods{FunctionalMethod::empirical, FunctionalMethod::multiplier};
  std::vector<TestKind> kinds{TestKind::KS, TestKind::CvM};
};

/// Rejection rates of KS / CvM tests of a true functional null (the
/// coefficient equals its analytic curve) and a false constant null.
inline SizePowerReport mc_functional(const Design& design, Index n, const FunctionalStudy& st, Index R,
                                     std::uint64_t seed, int workers = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  const Index M = static_cast<Index>(st.methods.size());
  const Index K = static_cast<Index>(st.kinds.size());
  const Index slots = M * K;
  std::vector<signed char> rej_true(static_cast<std::size_t>(R * slots), -1), rej_false(rej_true.size(), -1);
  const auto truth_fn = [&](double tau) { return design.truth(tau)(st.true_coefficient); };
  const auto false_fn = [&](double) { return st.false_value; };

  detail::parallel_for(static_cast<std::size_t>(R), detail::resolve_workers(workers), [&](std::size_t r) {
    Engine64 rng = make_stream(seed, r);
    const Dataset ds = design.draw(n, rng);
    const std::uint64_t boot_seed = stream_seed(seed ^ 0xb0075eedULL, r);
    std::optional<CoefProcess> exact, one;
    std::optional<Matrix> se_exact, se_one;
    for (Index m = 0; m < M; ++m) {
      try {
        const FunctionalMethod method = st.methods[static_cast<std::size_t>(m)];
        const bool use_one =
            method == FunctionalMethod::empirical_onestep || method == FunctionalMethod::multiplier_onestep;
        if (use_one && !one) {
          one = fit_process_onestep(ds, st.grid);
          se_one = process_standard_errors(ds, *one);
        }
        if (!use_one && !exact) {
          exact = fit_process_preprocess(ds, st.grid);
          attach_jacobians(ds, *exact, st.alpha);
          se_exact = process_standard_errors(ds, *exact);
        }
        const CoefProcess& proc = use_one ? *one : *exact;
        const Matrix& se = use_one ? *se_one : *se_exact;
        BootstrapConfig bc;
        bc.seed = boot_seed;
        bc.workers = 1;
        bc.B = st.B;
        bc.scheme = st.scheme;
        BootstrapDraws draws;
        switch (method) {
          case FunctionalMethod::empirical: draws = bootstrap_qr_preprocessed(ds, proc, bc); break;
          case FunctionalMethod::empirical_onestep: draws = bootstrap_onestep(ds, proc, bc); break;
          case FunctionalMethod::multiplier:
          case FunctionalMethod::multiplier_onestep: draws = score_multiplier_bootstrap(ds, proc, bc); break;
        }
        for (Index q = 0; q < K; ++q) {
          const TestKind kind = st.kinds[static_cast<std::size_t>(q)];
          const auto at = static_cast<std::size_t>(static_cast<Index>(r) * slots + m * K + q);
          rej_true[at] =
              functional_test(proc, draws, se, st.true_coefficient, truth_fn, kind, st.alpha).reject() ? 1 : 0;
          rej_false[at] =
              functional_test(proc, draws, se, st.false_coefficient, false_fn, kind, st.alpha).reject() ? 1 : 0;
        }
      } catch (const Error&) {
      }
    }
  });

  SizePowerReport rep;
  rep.design = design.name();
  rep.test = "functional";
  rep.n = n;
  rep.replications = R;
  rep.seed = seed;
  rep.alpha = st.alpha;
  rep.taus = st.grid.taus();
  for (Index m = 0; m < M; ++m)
    for (Index q = 0; q < K; ++q) {
      Index t = 0, a = 0, b = 0;
      for (Index r = 0; r < R; ++r) {
        const auto at = static_cast<std::size_t>(r * slots + m * K + q);
        if (rej_true[at] < 0) continue;
        ++t;
        a += rej_true[at];
        b += rej_false[at];
      }
      rep.rates.push_back(detail::summarise(to_string(st.kinds[static_cast<std::size_t>(q)]) + " " +
                                                to_string(st.methods[static_cast<std::size_t>(m)]),
                                            a, b, t));
    }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Timing

struct BenchRow {
  std::string panel;   // single quantile / process / bootstrap
  std::string engine;
  double seconds = 0.0;  // median over repetitions
  double speedup = 1.0;  // naive time / this time
};

struct BenchReport {
  Index n = 0;
  Index k = 0;
  std::size_t taus = 0;
  Index B = 0;
  int repetitions = 0;
  std::uint64_t seed = 0;
  std::vector<BenchRow> rows;

  double seconds(const std::string& panel, const std::string& engine) const {
    for (const auto& r : rows)
      if (r.panel == panel && r.engine == engine) return r.seconds;
    throw ValidationError("no bench row " + panel + "/" + engine);
  }

  std::string markdown() const {
    std::ostringstream os;
    os << "n = " << n << ", k = " << k << ", " << taus << " quantiles, B = " << B << ", median of " << repetitions
       << " runs\n\n";
    os << "| panel | engine | seconds | speedup vs naive |\n|---|---|---:|---:|\n";
    os.setf(std::ios::fixed);
    for (const auto& r : rows) {
      os.precision(4);
      os << "| " << r.panel << " | " << r.engine << " | " << r.seconds << " | ";
      os.precision(2);
      os << r.speedup << " |\n";
    }
    return os.str();
  }
};

namespace detail {
template <class F>
double median_seconds(int reps, F&& f) {
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) {
    const auto a = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
  }
  return median_of(t);
}
}  // namespace detail

struct BenchPanels {
  bool single = true;
  bool process = true;
  bool bootstrap = true;
};

/// Median single-worker wall time per engine on the location-scale design.
inline BenchReport bench_engines(Index n, Index k, const QuantileGrid& grid, Index B, int repetitions,
                                 std::uint64_t seed, BenchPanels panels = {}) {
  if (repetitions < 3) throw DomainError("bench_engines: repetitions must be at least 3");
  Engine64 rng = make_stream(seed, 0);
  const Dataset ds = Design::location_scale(k).draw(n, rng);
  BenchReport rep;
  rep.n = n;
  rep.k = k;
  rep.taus = grid.size();
  rep.B = B;
  rep.repetitions = repetitions;
  rep.seed = seed;
  const double mid = grid[grid.nearest(0.5)];

  auto add = [&](const std::string& panel, const std::string& engine, double s, double naive) {
    rep.rows.push_back({panel, engine, s, naive / s});
  };
  if (panels.single) {
    const double full = detail::median_seconds(repetitions, [&] { (void)solve_qr(ds, mid); });
    const double pk = detail::median_seconds(repetitions, [&] { (void)fit_single_pk(ds, mid); });
    add("single quantile", "full", full, full);
    add("single quantile", "preprocess", pk, full);
  }
  if (panels.process) {
    const double full = detail::median_seconds(repetitions, [&] { (void)fit_process_full(ds, grid); });
    const double pre = detail::median_seconds(repetitions, [&] { (void)fit_process_preprocess(ds, grid); });
    const double one = detail::median_seconds(repetitions, [&] { (void)fit_process_onestep(ds, grid); });
    add("process", "full", full, full);
    add("process", "preprocess", pre, full);
    add("process", "onestep", one, full);
  }
  if (panels.bootstrap) {
    const QuantileGrid g({mid});
    BootstrapConfig bc;
    bc.B = B;
    bc.seed = seed;
    bc.workers = 1;
    const double naive = detail::median_seconds(repetitions, [&] { (void)bootstrap_qr_naive(ds, g, bc); });
    const double pre = detail::median_seconds(repetitions, [&] {
      (void)bootstrap_qr_preprocessed(ds, fit_process_preprocess(ds, g), bc);
    });
    const double score = detail::median_seconds(repetitions, [&] {
      CoefProcess p = fit_process_preprocess(ds, g);
      attach_jacobians(ds, p);
      (void)score_multiplier_bootstrap(ds, p, bc);
    });
    add("bootstrap", "naive", naive, naive);
    add("bootstrap", "preprocess", pre, naive);
    add("bootstrap", "score", score, naive);
  }
  return rep;
}

}  // namespace qrp
