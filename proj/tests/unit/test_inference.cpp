#include <gtest/gtest.h>

#include "qrp/bootstrap.hpp"
#include "qrp/inference.hpp"
#include "qrp/simulate.hpp"
#include "support.hpp"

using namespace qrp;
using qrp::support::random_dataset;

namespace {

Dataset gaussian_location(Index n, Index k, std::uint64_t seed) {
  Engine64 rng(seed);
  std::normal_distribution<double> z;
  Matrix X(n, k);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    for (Index c = 1; c < k; ++c) X(i, c) = 1.0 + z(rng);
    y(i) = X.row(i).sum() + z(rng);
  }
  return Dataset::create(X, y);
}

struct Fixture {
  Dataset ds;
  CoefProcess proc;
  Matrix se;
  BootstrapDraws draws;
};

Fixture hagemann_fixture(Index n, Index B, std::uint64_t seed) {
  Engine64 rng(seed);
  Fixture f{dgp_hagemann(n, rng), {}, {}, {}};
  f.proc = fit_process_preprocess(f.ds, QuantileGrid::range(0.1, 0.9, 0.02));
  attach_jacobians(f.ds, f.proc);
  f.se = process_standard_errors(f.ds, f.proc);
  BootstrapConfig cfg;
  cfg.B = B;
  cfg.seed = seed + 1;
  f.draws = score_multiplier_bootstrap(f.ds, f.proc, cfg);
  return f;
}

JacobianEstimate scalar_jacobian(double v) {
  JacobianEstimate J;
  J.J_hat = Matrix::Constant(1, 1, v);
  J.min_eigenvalue = v;
  return J;
}

}  // namespace

TEST(SigmaHat, InterceptOnlyAtTheFit) {
  const auto ds = random_dataset(1001, 1, 3);
  for (double tau : {0.2, 0.5, 0.9}) {
    const Vector b = solve_qr(ds, tau).beta;
    const Matrix S = sigma_hat(ds, b, b, tau, tau);
    EXPECT_NEAR(S(0, 0), tau * (1 - tau), 1.0 / 1001.0 + 1e-12);
  }
}

TEST(SigmaHat, CollapsesUnderCorrectSpecification) {
  const auto ds = gaussian_location(5000, 3, 5);
  const Matrix G = ds.X().transpose() * ds.X() / 5000.0;
  for (double tau : {0.3, 0.5}) {
    const Vector b = solve_qr(ds, tau).beta;
    const Matrix S = sigma_hat(ds, b, b, tau, tau);
    const Matrix ref = tau * (1 - tau) * G;
    EXPECT_LE((S - ref).cwiseAbs().maxCoeff(), 0.1 * ref.cwiseAbs().maxCoeff());
    EXPECT_TRUE(S.isApprox(S.transpose()));
  }
  // Cross-quantile kernel approaches (min - product) E[XX'].
  const Vector b1 = solve_qr(ds, 0.3).beta, b2 = solve_qr(ds, 0.7).beta;
  const Matrix S12 = sigma_hat(ds, b1, b2, 0.3, 0.7);
  const Matrix ref12 = (0.3 - 0.21) * G;
  EXPECT_LE((S12 - ref12).cwiseAbs().maxCoeff(), 0.1 * ref12.cwiseAbs().maxCoeff());
}

TEST(SigmaHat, VanishesAsTheSecondQuantileReachesOne) {
  const auto ds = random_dataset(500, 2, 7);
  const Vector b = solve_qr(ds, 0.5).beta;
  Vector above = b;
  above(0) = ds.y().maxCoeff() + 10.0 + 10.0 * ds.X().col(1).cwiseAbs().maxCoeff() * std::abs(b(1));
  const Matrix S = sigma_hat(ds, b, above, 0.5, 0.9999);
  EXPECT_LE(S.cwiseAbs().maxCoeff(), 1e-4 * (ds.X().transpose() * ds.X() / 500.0).cwiseAbs().maxCoeff());
}

TEST(PointwiseVariance, ScalarSandwichAndIdentity) {
  const double tau = 0.3, f = 0.7;
  const Matrix V = pointwise_variance(scalar_jacobian(f), Matrix::Constant(1, 1, tau * (1 - tau)));
  EXPECT_NEAR(V(0, 0), tau * (1 - tau) / (f * f), 1e-14);
  JacobianEstimate I;
  I.J_hat = Matrix::Identity(3, 3);
  I.min_eigenvalue = 1.0;
  Matrix S(3, 3);
  S << 2, 0.5, 0.1, 0.5, 1, 0.2, 0.1, 0.2, 3;
  EXPECT_TRUE(pointwise_variance(I, S).isApprox(S, 1e-14));
  EXPECT_THROW(pointwise_variance(scalar_jacobian(0.0), Matrix::Ones(1, 1)), SingularJacobianError);
}

TEST(PointwiseVariance, MedianStandardErrorOfGaussianSample) {
  Engine64 rng(11);
  std::normal_distribution<double> z;
  const Index n = 5000;
  const double sigma = 2.0;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = sigma * z(rng);
  const auto ds = Dataset::create(Matrix::Ones(n, 1), y);
  CoefProcess p = fit_process_preprocess(ds, QuantileGrid({0.5}));
  attach_jacobians(ds, p);
  const double se = process_standard_errors(ds, p)(0, 0);
  const double analytic = std::sqrt(std::numbers::pi / 2.0) * sigma / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(se, analytic, 0.15 * analytic);
}

TEST(PointwiseTest, NullAtEstimate) {
  QrFit f;
  f.tau = 0.5;
  f.beta = Vector::Constant(2, 1.25);
  const auto t = pointwise_test_se(f, 0.1, 1, 1.25);
  EXPECT_EQ(t.statistic, 0.0);
  EXPECT_EQ(t.p_value, 1.0);
  EXPECT_FALSE(t.reject());
}

TEST(PointwiseTest, BoundaryIsNotRejected) {
  QrFit f;
  f.tau = 0.5;
  f.beta = Vector::Constant(1, 1.959963984540054);
  const auto t = pointwise_test_se(f, 1.0, 0, 0.0, 0.05);
  EXPECT_NEAR(t.p_value, 0.05, 1e-12);
  EXPECT_FALSE(t.reject());
  f.beta(0) = 1.96;
  EXPECT_NEAR(pointwise_test_se(f, 1.0, 0, 0.0).p_value, 0.05, 1e-4);
  f.beta(0) = 2.0;
  EXPECT_TRUE(pointwise_test_se(f, 1.0, 0, 0.0).reject());
}

TEST(PointwiseTest, Errors) {
  QrFit f;
  f.beta = Vector::Zero(2);
  EXPECT_THROW(pointwise_test_se(f, 0.0, 0, 0.0), DomainError);
  EXPECT_THROW(pointwise_test_se(f, 1.0, 0, 0.0, 1.0), DomainError);
}

TEST(BootstrapCriticalValue, RejectionMatchesPValue) {
  Engine64 rng(13);
  std::normal_distribution<double> z;
  for (int B : {19, 99, 100, 250}) {
    std::vector<double> stats(static_cast<std::size_t>(B));
    for (auto& s : stats) s = std::abs(z(rng));
    for (double alpha : {0.05, 0.1}) {
      const double crit = detail::bootstrap_critical_value(stats, alpha);
      for (double obs : {0.0, 0.5, 1.5, 1.9, 2.2, 3.0}) {
        const bool reject = obs > crit;
        EXPECT_EQ(reject, detail::bootstrap_p_value(stats, obs) < alpha) << "B " << B << " obs " << obs;
      }
      for (double s : stats) EXPECT_EQ(s > crit, detail::bootstrap_p_value(stats, s) < alpha);
    }
  }
}

TEST(FunctionalTest, NullEqualToEstimate) {
  const auto f = hagemann_fixture(800, 200, 17);
  for (auto kind : {TestKind::KS, TestKind::CvM}) {
    const auto t = functional_test(f.proc, f.draws, f.se, 1, [&](double tau) {
      return f.proc.fits[f.proc.grid.nearest(tau)].beta(1);
    }, kind);
    EXPECT_EQ(t.statistic, 0.0);
    EXPECT_EQ(t.p_value, 1.0);
    EXPECT_FALSE(t.reject());
  }
}

TEST(FunctionalTest, TrueAndFalseNulls) {
  const auto f = hagemann_fixture(1000, 250, 19);
  const auto truth_x = functional_test(f.proc, f.draws, f.se, 1, [](double) { return 1.0; }, TestKind::KS);
  EXPECT_GT(truth_x.p_value, 0.01);
  const auto false_x2 = functional_test(f.proc, f.draws, f.se, 2, [](double) { return 0.0; }, TestKind::CvM);
  EXPECT_TRUE(false_x2.reject());
  EXPECT_LT(false_x2.p_value, 0.01);
}

TEST(FunctionalTest, MisalignedInputs) {
  auto f = hagemann_fixture(500, 120, 23);
  auto null = [](double) { return 0.0; };
  EXPECT_THROW(functional_test(f.proc, f.draws, f.se, 1, null, TestKind::pointwise), ValidationError);
  EXPECT_THROW(functional_test(f.proc, f.draws, f.se, 5, null, TestKind::KS), ShapeError);
  Matrix zero = f.se;
  zero(3, 1) = 0.0;
  EXPECT_THROW(functional_test(f.proc, f.draws, zero, 1, null, TestKind::KS), DomainError);
  BootstrapDraws other = f.draws;
  other.grid = QuantileGrid::range(0.1, 0.9, 0.02);
  std::vector<double> t = other.grid.taus();
  t.back() = 0.95;
  other.grid = QuantileGrid(t);
  EXPECT_THROW(functional_test(f.proc, other, f.se, 1, null, TestKind::KS), ValidationError);
}

TEST(UniformBands, DegenerateDrawsGiveZeroWidth) {
  auto f = hagemann_fixture(500, 120, 29);
  for (Index b = 0; b < f.draws.B; ++b)
    for (std::size_t j = 0; j < f.proc.size(); ++j)
      for (Index c = 0; c < 3; ++c) f.draws.at(b, j, c) = f.proc.fits[j].beta(c);
  const auto u = uniform_bands(f.proc, f.draws, f.se);
  EXPECT_EQ(u.critical_value, 0.0);
  EXPECT_EQ(u.upper, u.lower);
}

TEST(UniformBands, WiderAtSmallerAlpha) {
  const auto f = hagemann_fixture(800, 400, 31);
  const auto u10 = uniform_bands(f.proc, f.draws, f.se, 0.10);
  const auto u05 = uniform_bands(f.proc, f.draws, f.se, 0.05);
  const auto u01 = uniform_bands(f.proc, f.draws, f.se, 0.01);
  EXPECT_LE(u10.critical_value, u05.critical_value);
  EXPECT_LE(u05.critical_value, u01.critical_value);
  EXPECT_TRUE(((u01.upper - u01.lower).array() >= (u10.upper - u10.lower).array()).all());
  EXPECT_TRUE((u05.pointwise_critical.array() <= u05.critical_value).all());
}

TEST(UniformBands, CoherentWithTheKsTest) {
  const auto f = hagemann_fixture(800, 250, 37);
  for (Index c : {Index{1}, Index{2}}) {
    const auto u = uniform_bands(f.proc, f.draws, f.se, 0.05, {c});
    for (double g = -0.6; g <= 1.6; g += 0.05) {
      const auto t = functional_test(f.proc, f.draws, f.se, c, [g](double) { return g; }, TestKind::KS);
      bool outside = false;
      for (Index j = 0; j < static_cast<Index>(f.proc.size()); ++j) {
        const double est = f.proc.fits[static_cast<std::size_t>(j)].beta(c);
        outside = outside || std::abs(est - g) / f.se(j, c) > u.critical_value;
      }
      EXPECT_EQ(t.reject(), outside) << "coefficient " << c << " null " << g;
      EXPECT_DOUBLE_EQ(t.critical_value, u.critical_value);
    }
  }
}
