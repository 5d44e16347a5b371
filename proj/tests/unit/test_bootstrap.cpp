#include <gtest/gtest.h>

#include <filesystem>

#include "qrp/bootstrap.hpp"
#include "support.hpp"

using namespace qrp;
using qrp::support::random_dataset;
using qrp::support::same_solution;

namespace {

struct Moments {
  double mean, var, min;
};

Moments moments_of(WeightScheme s, Index n, std::uint64_t seed) {
  Engine64 rng(seed);
  const Vector w = draw_weights(s, n, rng);
  const double mean = w.mean();
  return {mean, (w.array() - mean).square().sum() / static_cast<double>(n - 1), w.minCoeff()};
}

// Materialises replicate r of the empirical bootstrap.
Dataset resample(const Dataset& ds, const BootstrapConfig& cfg, Index r) {
  const Vector counts = detail::replicate_counts(cfg, ds.n(), r);
  Matrix X(ds.n(), ds.k());
  Vector y(ds.n());
  Index row = 0;
  for (Index i = 0; i < ds.n(); ++i)
    for (long c = 0; c < std::lround(counts(i)); ++c) {
      X.row(row) = ds.X().row(i);
      y(row++) = ds.y()(i);
    }
  return Dataset::unchecked(X, y);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("qrp_boot_" + name)).string();
}

}  // namespace

TEST(DrawWeights, SchemeMoments) {
  const Index n = 1000000;
  const auto g = moments_of(WeightScheme::gaussian, n, 1);
  EXPECT_NEAR(g.mean, 0.0, 4e-3);
  EXPECT_NEAR(g.var, 1.0, 1e-2);
  const auto w = moments_of(WeightScheme::wild, n, 2);
  EXPECT_NEAR(w.mean, 0.0, 5e-3);
  EXPECT_NEAR(w.var, 1.0, 1e-2);
  const auto e = moments_of(WeightScheme::bayesian_exponential, n, 3);
  EXPECT_NEAR(e.mean, 0.0, 5e-3);
  EXPECT_NEAR(e.var, 1.0, 1e-2);
  EXPECT_GE(e.min, -1.0);
}

TEST(DrawWeights, MultinomialCountsSumToN) {
  for (Index n : {1, 7, 1000}) {
    Engine64 rng(static_cast<std::uint64_t>(n));
    const Vector w = draw_weights(WeightScheme::multinomial, n, rng);
    EXPECT_DOUBLE_EQ(w.sum(), static_cast<double>(n));
    EXPECT_GE(w.minCoeff(), 0.0);
    EXPECT_TRUE((w.array() == w.array().round()).all());
  }
  Engine64 rng(0);
  EXPECT_THROW(draw_weights(WeightScheme::gaussian, 0, rng), DomainError);
}

TEST(DrawWeights, StreamsAreReproducible) {
  Engine64 a = make_stream(42, 3), b = make_stream(42, 3), c = make_stream(42, 4);
  const Vector wa = draw_weights(WeightScheme::wild, 100, a);
  EXPECT_EQ(wa, draw_weights(WeightScheme::wild, 100, b));
  EXPECT_NE(wa, draw_weights(WeightScheme::wild, 100, c));
}

TEST(SchemeNames, RoundTrip) {
  for (auto s : {WeightScheme::bayesian_exponential, WeightScheme::gaussian, WeightScheme::wild, WeightScheme::multinomial})
    EXPECT_EQ(scheme_from_string(to_string(s)), s);
  EXPECT_THROW(scheme_from_string("rademacher"), ValidationError);
}

TEST(EmpiricalBootstrap, IdentityResampleReturnsSampleFit) {
  const auto ds = random_dataset(800, 3, 5);
  const auto grid = QuantileGrid::range(0.2, 0.8, 0.1);
  const CoefProcess p = fit_process_preprocess(ds, grid);
  BootstrapConfig cfg;
  cfg.B = 1;
  cfg.degenerate = true;
  const auto d = bootstrap_qr_preprocessed(ds, p, cfg);
  ASSERT_EQ(d.B, 1);
  for (std::size_t j = 0; j < grid.size(); ++j)
    EXPECT_TRUE(same_solution(ds, grid[j], d.replicate(0).row(static_cast<Index>(j)).transpose(), p.fits[j].beta));
}

TEST(EmpiricalBootstrap, EveryDrawIsTheExactResampleFit) {
  const auto ds = random_dataset(500, 3, 7);
  const auto grid = QuantileGrid::range(0.1, 0.9, 0.2);
  BootstrapConfig cfg;
  cfg.B = 20;
  cfg.seed = 99;
  const auto d = bootstrap_qr_preprocessed(ds, grid, cfg);
  ASSERT_EQ(d.B, 20);
  for (Index b = 0; b < d.B; ++b) {
    const Dataset rs = resample(ds, cfg, d.replicate_ids[static_cast<std::size_t>(b)]);
    for (std::size_t j = 0; j < grid.size(); ++j) {
      const Vector draw = d.replicate(b).row(static_cast<Index>(j)).transpose();
      EXPECT_TRUE(same_solution(rs, grid[j], draw, solve_qr(rs, grid[j]).beta)) << "b " << b << " tau " << grid[j];
    }
  }
}

TEST(EmpiricalBootstrap, NaiveAndPreprocessedAgree) {
  const auto ds = random_dataset(600, 3, 9);
  const auto grid = QuantileGrid({0.25, 0.5, 0.75});
  BootstrapConfig cfg;
  cfg.B = 10;
  const auto a = bootstrap_qr_preprocessed(ds, grid, cfg);
  const auto b = bootstrap_qr_naive(ds, grid, cfg);
  ASSERT_EQ(a.B, b.B);
  for (Index r = 0; r < a.B; ++r) {
    const Dataset rs = resample(ds, cfg, r);
    for (std::size_t j = 0; j < grid.size(); ++j)
      EXPECT_TRUE(same_solution(rs, grid[j], a.replicate(r).row(static_cast<Index>(j)).transpose(),
                                b.replicate(r).row(static_cast<Index>(j)).transpose()));
  }
}

TEST(EmpiricalBootstrap, IdenticalAcrossWorkerCounts) {
  const auto ds = random_dataset(1000, 4, 11);
  const auto grid = QuantileGrid::range(0.2, 0.8, 0.05);
  BootstrapConfig cfg;
  cfg.B = 16;
  cfg.workers = 1;
  const auto one = bootstrap_qr_preprocessed(ds, grid, cfg);
  cfg.workers = 4;
  const auto four = bootstrap_qr_preprocessed(ds, grid, cfg);
  EXPECT_EQ(one.values, four.values);
  EXPECT_EQ(one.replicate_ids, four.replicate_ids);
}

TEST(OnestepBootstrap, StartOnlyGridMatchesPreprocessedDraws) {
  const auto ds = random_dataset(1500, 3, 13);
  const auto grid = QuantileGrid({0.5});
  const CoefProcess p = fit_process_preprocess(ds, grid);
  BootstrapConfig cfg;
  cfg.B = 8;
  const auto a = bootstrap_onestep(ds, p, cfg);
  const auto b = bootstrap_qr_preprocessed(ds, p, cfg);
  ASSERT_EQ(a.B, b.B);
  for (Index r = 0; r < a.B; ++r) {
    const Dataset rs = resample(ds, cfg, r);
    EXPECT_TRUE(same_solution(rs, 0.5, a.replicate(r).row(0).transpose(), b.replicate(r).row(0).transpose()));
  }
}

TEST(OnestepBootstrap, DrawsSpreadLikeEmpiricalDraws) {
  const auto ds = random_dataset(3000, 2, 15);
  const auto grid = QuantileGrid::range(0.3, 0.7, 0.01);
  const CoefProcess p = fit_process_onestep(ds, grid);
  BootstrapConfig cfg;
  cfg.B = 60;
  const Matrix sd1 = bootstrap_onestep(ds, p, cfg).standard_deviations();
  const Matrix sd2 = bootstrap_qr_preprocessed(ds, fit_process_preprocess(ds, grid), cfg).standard_deviations();
  EXPECT_NEAR(sd1.mean() / sd2.mean(), 1.0, 0.2);
}

TEST(ScoreBootstrap, ZeroMultipliersReturnTheEstimate) {
  const auto ds = random_dataset(1000, 3, 17);
  const auto grid = QuantileGrid::range(0.2, 0.8, 0.1);
  CoefProcess p = fit_process_preprocess(ds, grid);
  attach_jacobians(ds, p);
  BootstrapConfig cfg;
  cfg.B = 5;
  cfg.degenerate = true;
  const auto d = score_multiplier_bootstrap(ds, p, cfg);
  for (Index b = 0; b < d.B; ++b)
    for (std::size_t j = 0; j < grid.size(); ++j)
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(d.at(b, j, c), p.fits[j].beta(c));
}

TEST(ScoreBootstrap, NeedsJacobians) {
  const auto ds = random_dataset(200, 2, 1);
  const CoefProcess p = fit_process_preprocess(ds, QuantileGrid({0.5}));
  EXPECT_THROW(score_multiplier_bootstrap(ds, p), ValidationError);
}

TEST(ScoreBootstrap, MedianSpreadMatchesTheAnalyticValue) {
  Engine64 rng(19);
  std::normal_distribution<double> z;
  const Index n = 5000;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = z(rng);
  const auto ds = Dataset::create(Matrix::Ones(n, 1), y);
  CoefProcess p = fit_process_preprocess(ds, QuantileGrid({0.5}));
  attach_jacobians(ds, p);
  BootstrapConfig cfg;
  cfg.B = 2000;
  const auto d = score_multiplier_bootstrap(ds, p, cfg);
  const double analytic = 0.5 / 0.3989422804014327 / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(d.standard_deviations()(0, 0), analytic, 0.15 * analytic);
}

TEST(ScoreBootstrap, DrawsAreCentred) {
  const auto ds = random_dataset(2000, 3, 21);
  const auto grid = QuantileGrid::range(0.25, 0.75, 0.25);
  CoefProcess p = fit_process_preprocess(ds, grid);
  attach_jacobians(ds, p);
  BootstrapConfig cfg;
  cfg.B = 2000;
  const auto d = score_multiplier_bootstrap(ds, p, cfg);
  const Matrix sd = d.standard_deviations();
  for (std::size_t j = 0; j < grid.size(); ++j)
    for (Index c = 0; c < 3; ++c) {
      const double centred = d.coefficient(j, c).mean() - p.fits[j].beta(c);
      EXPECT_LE(std::abs(centred), 4.0 * sd(static_cast<Index>(j), c) / std::sqrt(2000.0));
    }
}

TEST(ScoreBootstrap, IdenticalAcrossWorkerCounts) {
  const auto ds = random_dataset(1500, 4, 23);
  CoefProcess p = fit_process_preprocess(ds, QuantileGrid::range(0.1, 0.9, 0.05));
  attach_jacobians(ds, p);
  BootstrapConfig cfg;
  cfg.B = 300;
  cfg.scheme = WeightScheme::wild;
  cfg.workers = 1;
  const auto one = score_multiplier_bootstrap(ds, p, cfg);
  cfg.workers = 3;
  const auto three = score_multiplier_bootstrap(ds, p, cfg);
  EXPECT_EQ(one.values, three.values);
}

TEST(BootstrapDraws, QrbdRoundTrip) {
  const auto ds = random_dataset(400, 3, 25);
  CoefProcess p = fit_process_preprocess(ds, QuantileGrid::range(0.2, 0.8, 0.2));
  attach_jacobians(ds, p);
  BootstrapConfig cfg;
  cfg.B = 7;
  cfg.seed = 1234567;
  const auto d = score_multiplier_bootstrap(ds, p, cfg);
  const auto path = temp_path("rt.qrbd");
  d.write_qrbd(path);
  const auto back = BootstrapDraws::read_qrbd(path);
  EXPECT_EQ(back.B, d.B);
  EXPECT_EQ(back.k, d.k);
  EXPECT_EQ(back.base_seed, d.base_seed);
  EXPECT_EQ(back.grid.taus(), d.grid.taus());
  EXPECT_EQ(back.values, d.values);
}

TEST(BootstrapDraws, QrbdRejectsOtherFiles) {
  const auto path = temp_path("bad.qrbd");
  std::ofstream(path) << "not a draws file";
  EXPECT_THROW(BootstrapDraws::read_qrbd(path), ParseError);
}

TEST(BootstrapConfig, Validation) {
  BootstrapConfig c;
  c.B = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.max_failure_rate = 1.0;
  EXPECT_THROW(c.validate(), DomainError);
}
