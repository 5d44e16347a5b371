#include <gtest/gtest.h>

#include <set>

#include "qrp/preprocess.hpp"
#include "support.hpp"

using namespace qrp;
using qrp::support::random_dataset;
using qrp::support::same_solution;

TEST(ResidualScale, InterceptOnlyIsOne) {
  const Vector z = residual_scale(Matrix::Ones(25, 1));
  EXPECT_NEAR((z.array() - 1.0).abs().maxCoeff(), 0.0, 1e-12);
}

TEST(ResidualScale, DuplicatedRowsShareScaleAndAllPositive) {
  const auto ds = random_dataset(100, 4, 3);
  Matrix X = ds.X();
  X.row(7) = X.row(42);
  const Vector z = residual_scale(X);
  EXPECT_NEAR(z(7), z(42), 1e-12);
  EXPECT_GT(z.minCoeff(), 0.0);
}

TEST(ResidualScale, MatchesHatDiagonal) {
  const auto ds = random_dataset(60, 3, 5);
  const Vector z = residual_scale(ds);
  const Matrix G = (ds.X().transpose() * ds.X() / 60.0).inverse();
  for (Index i = 0; i < 60; ++i) {
    const double q = ds.X().row(i) * G * ds.X().row(i).transpose();
    EXPECT_NEAR(z(i), std::sqrt(q), 1e-10);
  }
}

TEST(ResidualScale, RankDeficientThrows) {
  Matrix X(10, 2);
  X.col(0).setOnes();
  X.col(1).setConstant(2.0);
  EXPECT_THROW(residual_scale(X), RankError);
}

TEST(Partition, FullWindowKeepsEverything) {
  const auto ds = random_dataset(80, 2, 1);
  const Partition p = partition(ds.y(), Vector::Ones(80), 0.5, 80);
  EXPECT_TRUE(p.J_L.empty());
  EXPECT_TRUE(p.J_H.empty());
  EXPECT_EQ(p.kept.size(), 80u);
}

TEST(Partition, HalfWindowSymmetricResiduals) {
  Engine64 rng(2024);
  std::normal_distribution<double> z;
  Vector r(1000);
  for (Index i = 0; i < 1000; ++i) r(i) = z(rng);
  const Partition p = partition(r, Vector::Ones(1000), 0.5, 500);
  EXPECT_EQ(p.kept.size(), 500u);
  EXPECT_EQ(p.J_L.size(), 250u);
  EXPECT_EQ(p.J_H.size(), 250u);
  for (Index i : p.J_L)
    for (Index j : p.kept) EXPECT_LT(r(i), r(j));
}

TEST(Partition, TiesStillCoverEveryRow) {
  const Partition p = partition(Vector::Constant(50, 1.0), Vector::Ones(50), 0.3, 10);
  std::set<Index> seen;
  for (const auto* part : {&p.J_L, &p.J_H, &p.kept})
    for (Index i : *part) EXPECT_TRUE(seen.insert(i).second);
  EXPECT_EQ(seen.size(), 50u);
}

TEST(Partition, RejectsEmptyWindow) {
  EXPECT_THROW(partition(Vector::Zero(5), Vector::Ones(5), 0.5, 0), DomainError);
}

TEST(SolvePreprocessed, ExactPrelimNeedsNoFixups) {
  const auto ds = random_dataset(3000, 5, 7);
  const QrFit full = solve_qr(ds, 0.4);
  const QrFit pre = solve_preprocessed(ds, 0.4, full.beta);
  EXPECT_EQ(pre.fixups, 0);
  EXPECT_TRUE(same_solution(ds, 0.4, pre.beta, full.beta));
}

TEST(SolvePreprocessed, GarbagePrelimStillExact) {
  auto base = random_dataset(500, 3, 9);
  const Vector y = base.y().array() + 50.0;
  const auto ds = Dataset::create(base.X(), y);
  const QrFit pre = solve_preprocessed(ds, 0.7, Vector::Zero(3));
  EXPECT_TRUE(same_solution(ds, 0.7, pre.beta, solve_qr(ds, 0.7).beta));
  EXPECT_GT(pre.fixups + pre.restarts + (pre.fell_back ? 1 : 0), 0);
}

TEST(SolvePreprocessed, NeighbouringPrelimKeepsAboutThreeRootKn) {
  const auto ds = random_dataset(5000, 8, 11);
  const Vector prelim = solve_qr(ds, 0.49).beta;
  const QrFit pre = solve_preprocessed(ds, 0.5, prelim);
  EXPECT_TRUE(same_solution(ds, 0.5, pre.beta, solve_qr(ds, 0.5).beta));
  EXPECT_EQ(pre.restarts, 0);
  EXPECT_NEAR(static_cast<double>(pre.kept), 600.0, 60.0);
}

TEST(SolvePreprocessed, SignGuaranteeAtSolution) {
  const auto ds = random_dataset(4000, 6, 13);
  const QrFit pre = solve_preprocessed(ds, 0.2, solve_qr(ds, 0.22).beta);
  EXPECT_LE(pre.moment_inf_norm, moment_bound(ds) * (1 + 1e-12));
  EXPECT_NEAR(pre.objective, objective(ds, 0.2, pre.beta), 1e-9 * pre.objective);
}

TEST(SolvePreprocessed, TinyBudgetFallsBackToFullSolve) {
  const auto ds = random_dataset(2000, 4, 15);
  PreprocessConfig cfg;
  cfg.m = 0.05;
  cfg.max_rounds = 1;
  const Vector garbage = Vector::Constant(4, 25.0);
  const QrFit pre = solve_preprocessed(ds, 0.5, garbage, cfg);
  EXPECT_TRUE(same_solution(ds, 0.5, pre.beta, solve_qr(ds, 0.5).beta));
}

TEST(FitSinglePk, SubsampleSize) {
  EXPECT_EQ(pk_subsample_size(5000, 8), 1170);
  const auto ds = random_dataset(5000, 8, 17);
  const QrFit f = fit_single_pk(ds, 0.5);
  EXPECT_TRUE(same_solution(ds, 0.5, f.beta, solve_qr(ds, 0.5).beta));
}

TEST(FitSinglePk, SmallSampleFallsThrough) {
  const auto ds = random_dataset(9, 3, 19);
  const QrFit f = fit_single_pk(ds, 0.3);
  EXPECT_TRUE(same_solution(ds, 0.3, f.beta, solve_qr(ds, 0.3).beta));
  EXPECT_EQ(f.kept, 9);
}

TEST(FitProcessPreprocess, SinglePointMatchesSingleTau) {
  const auto ds = random_dataset(3000, 4, 21);
  const CoefProcess p = fit_process_preprocess(ds, QuantileGrid({0.35}));
  ASSERT_EQ(p.size(), 1u);
  EXPECT_TRUE(same_solution(ds, 0.35, p.fits[0].beta, fit_single_pk(ds, 0.35).beta));
}

TEST(FitProcessPreprocess, FullGridMatchesPerTauSolves) {
  const auto ds = random_dataset(5000, 8, 23);
  const auto grid = QuantileGrid::range(0.01, 0.99, 0.01);
  const CoefProcess pre = fit_process_preprocess(ds, grid);
  ASSERT_EQ(pre.size(), 99u);
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const Vector full = solve_qr(ds, grid[j]).beta;
    EXPECT_TRUE(same_solution(ds, grid[j], pre.fits[j].beta, full)) << "tau " << grid[j];
    EXPECT_LE(pre.fits[j].moment_inf_norm, moment_bound(ds) * (1 + 1e-12));
  }
}

TEST(PreprocessConfig, Validation) {
  PreprocessConfig c;
  c.m = 0.0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.max_rounds = 0;
  EXPECT_THROW(c.validate(), DomainError);
}
