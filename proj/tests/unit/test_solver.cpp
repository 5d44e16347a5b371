#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "qrp/solver.hpp"
#include "support.hpp"

using namespace qrp;
using qrp::support::random_dataset;
using qrp::support::same_solution;

namespace {

Dataset intercept_only(std::initializer_list<double> ys) {
  Vector y(static_cast<Index>(ys.size()));
  Index i = 0;
  for (double v : ys) y(i++) = v;
  return Dataset::create(Matrix::Ones(y.size(), 1), y);
}

}  // namespace

TEST(SolveQr, SampleQuantiles) {
  const auto ds = intercept_only({1, 2, 3});
  EXPECT_NEAR(solve_qr(ds, 0.5).beta(0), 2.0, 1e-9);
  EXPECT_NEAR(solve_qr(ds, 0.25).beta(0), 1.0, 1e-9);
}

TEST(SolveQr, MatchesBruteForceSmall) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto ds = random_dataset(20, 3, 100 + s);
    for (double tau : {0.2, 0.5, 0.85}) {
      const QrFit a = solve_qr(ds, tau);
      const QrFit b = solve_qr_bruteforce(ds, tau);
      EXPECT_NEAR(a.objective, b.objective, 1e-9 * std::max(1.0, b.objective)) << "seed " << s;
    }
  }
}

TEST(SolveQrBruteForce, Examples) {
  EXPECT_DOUBLE_EQ(solve_qr_bruteforce(Matrix::Ones(1, 1), Vector::Constant(1, 5.0), 0.5).beta(0), 5.0);
  Matrix X(3, 1);
  X << 1, 2, 3;
  Vector y(3);
  y << 1, 2, 3;
  EXPECT_DOUBLE_EQ(solve_qr_bruteforce(Dataset::create(X, y), 0.5).beta(0), 1.0);
  const auto ds = random_dataset(12, 2, 9);
  EXPECT_NEAR(solve_qr_bruteforce(ds, 0.4).objective, solve_qr(ds, 0.4).objective, 1e-9);
}

TEST(SolveQrBruteForce, SizeGuard) {
  EXPECT_THROW(solve_qr_bruteforce(random_dataset(31, 2, 1), 0.5), SizeError);
  EXPECT_THROW(solve_qr_bruteforce(random_dataset(20, 5, 1), 0.5), SizeError);
}

TEST(SolveQr, NoDirectionImprovesTheObjective) {
  const auto ds = random_dataset(300, 4, 3);
  Engine64 rng(4);
  std::normal_distribution<double> z;
  for (double tau : {0.1, 0.5, 0.9}) {
    const QrFit f = solve_qr(ds, tau);
    for (int d = 0; d < 50; ++d) {
      Vector dir(ds.k());
      for (Index c = 0; c < ds.k(); ++c) dir(c) = z(rng);
      for (double eps : {1e-6, 1e-3, 1e-1})
        EXPECT_GE(objective(ds, tau, f.beta + eps * dir), f.objective - 1e-9 * f.objective);
    }
  }
}

TEST(SolveQr, InterpolatesAtLeastKPoints) {
  const auto ds = random_dataset(500, 5, 5);
  for (double tau : {0.15, 0.5, 0.8}) {
    const QrFit f = solve_qr(ds, tau);
    const Vector r = ds.y() - ds.X() * f.beta;
    const auto zeros = (r.array().abs() <= 1e-9 * (1.0 + ds.y().cwiseAbs().maxCoeff())).count();
    EXPECT_GE(zeros, ds.k());
    EXPECT_TRUE(f.certified);
  }
}

TEST(SolveQr, MomentBoundHolds) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto ds = random_dataset(1000, 8, 20 + s);
    const QrFit f = solve_qr(ds, 0.3);
    EXPECT_LE(f.moment_inf_norm, moment_bound(ds) * (1 + 1e-12));
  }
}

TEST(SolveQr, AffineEquivariance) {
  const auto ds = random_dataset(400, 3, 11);
  Vector g(3);
  g << 0.5, -1.0, 2.0;
  const double a = 3.5;
  const Vector y2 = a * ds.y() + ds.X() * g;
  const auto ds2 = Dataset::create(ds.X(), y2);
  for (double tau : {0.25, 0.6}) {
    const Vector b1 = solve_qr(ds, tau).beta;
    const Vector b2 = solve_qr(ds2, tau).beta;
    EXPECT_TRUE(same_solution(ds2, tau, b2, a * b1 + g));
  }
  // Negative scaling swaps tau and 1 - tau.
  const auto ds3 = Dataset::create(ds.X(), -ds.y());
  EXPECT_TRUE(same_solution(ds3, 0.3, solve_qr(ds3, 0.3).beta, -solve_qr(ds, 0.7).beta));
}

TEST(SolveQr, DependsOnResponsesOnlyThroughSigns) {
  const auto ds = random_dataset(300, 3, 13);
  const double tau = 0.4;
  const QrFit f = solve_qr(ds, tau);
  const Vector r = ds.y() - ds.X() * f.beta;
  Vector y = ds.y();
  for (Index i = 0; i < y.size(); ++i) {
    if (r(i) > 1e-8) y(i) += 5.0 * (1 + i % 3);
    if (r(i) < -1e-8) y(i) -= 7.0;
  }
  const auto moved = Dataset::create(ds.X(), y);
  EXPECT_TRUE(same_solution(moved, tau, solve_qr(moved, tau).beta, f.beta));
}

TEST(SolveQr, WarmStartDoesNotChangeTheOptimum) {
  const auto ds = random_dataset(800, 5, 17);
  const QrFit cold = solve_qr(ds, 0.55);
  const QrFit warm = solve_qr(ds, 0.55, {}, solve_qr(ds, 0.5).beta);
  EXPECT_TRUE(same_solution(ds, 0.55, warm.beta, cold.beta));
}

TEST(SolveQr, ConvergenceErrorCarriesIterate) {
  const auto ds = random_dataset(500, 4, 19);
  SolverOptions o;
  o.max_iter = 1;
  o.polish = false;
  try {
    solve_qr(ds, 0.5, o);
    FAIL() << "expected a convergence error";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.last_iterate().size(), 4);
    EXPECT_GT(e.gap(), 0.0);
  }
}

TEST(SolveQr, InputErrors) {
  const auto ds = random_dataset(50, 3, 1);
  EXPECT_THROW(solve_qr(ds, 1.0), DomainError);
  EXPECT_THROW(solve_qr(ds, 0.5, {}, Vector::Zero(2)), ShapeError);
  SolverOptions bad;
  bad.max_iter = 0;
  EXPECT_THROW(solve_qr(ds, 0.5, bad), DomainError);
}

TEST(SolveGlobbed, EmptyGlobsEqualFullSolve) {
  const auto ds = random_dataset(200, 4, 23);
  std::vector<Index> all(200);
  std::iota(all.begin(), all.end(), Index{0});
  const auto gp = make_globbed(ds.X(), ds.y(), all, {}, {}, Vector::Zero(4), GlobScale::of(ds.X(), ds.y()));
  EXPECT_FALSE(gp.low.has_value());
  EXPECT_FALSE(gp.high.has_value());
  const QrFit g = solve_globbed(gp, 0.35);
  EXPECT_TRUE(same_solution(ds, 0.35, g.beta, solve_qr(ds, 0.35).beta));
}

TEST(SolveGlobbed, CorrectSignsGiveTheFullSolution) {
  const auto ds = random_dataset(200, 4, 29);
  const double tau = 0.6;
  const Vector exact = solve_qr(ds, tau).beta;
  const Vector r = ds.y() - ds.X() * exact;
  std::vector<Index> idx(200);
  std::iota(idx.begin(), idx.end(), Index{0});
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) { return r(a) < r(b); });
  std::vector<Index> low(idx.begin(), idx.begin() + 60), kept(idx.begin() + 60, idx.begin() + 140),
      high(idx.begin() + 140, idx.end());
  std::sort(kept.begin(), kept.end());
  const auto gp = make_globbed(ds.X(), ds.y(), kept, low, high, exact, GlobScale::of(ds.X(), ds.y()));
  const QrFit g = solve_globbed(gp, tau);
  EXPECT_TRUE(same_solution(ds, tau, g.beta, exact));
  EXPECT_LE(g.moment_inf_norm, moment_bound(ds) * (1 + 1e-12));
}
