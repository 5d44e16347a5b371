#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "qrp/core_model.hpp"
#include "qrp/errors.hpp"
#include "qrp/solver.hpp"
#include "support.hpp"

using namespace qrp;

namespace {

Dataset intercept_only(std::initializer_list<double> ys) {
  Vector y(static_cast<Index>(ys.size()));
  Index i = 0;
  for (double v : ys) y(i++) = v;
  return Dataset::create(Matrix::Ones(y.size(), 1), y);
}

std::string temp_csv(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / ("qrp_core_" + name + ".csv");
  std::ofstream(p) << body;
  return p.string();
}

}  // namespace

TEST(CheckLoss, Examples) {
  EXPECT_DOUBLE_EQ(check_loss(0.5, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(check_loss(0.25, -4.0), 3.0);
  EXPECT_DOUBLE_EQ(check_loss(0.9, 0.0), 0.0);
}

TEST(CheckLoss, NonNegativeAndConvex) {
  for (double tau : {0.05, 0.3, 0.5, 0.77, 0.99})
    for (double u = -3.0; u <= 3.0; u += 0.25) {
      EXPECT_GE(check_loss(tau, u), 0.0);
      const double mid = check_loss(tau, u + 0.125);
      EXPECT_LE(mid, 0.5 * (check_loss(tau, u) + check_loss(tau, u + 0.25)) + 1e-15);
    }
}

TEST(CheckLoss, RejectsTauOutsideUnitInterval) {
  EXPECT_THROW(check_loss(0.0, 1.0), DomainError);
  EXPECT_THROW(check_loss(1.0, 1.0), DomainError);
  EXPECT_THROW(check_loss(-0.2, 1.0), DomainError);
}

TEST(Objective, Examples) {
  const auto ds = intercept_only({1, 2, 3});
  EXPECT_DOUBLE_EQ(objective(ds, 0.5, Vector::Constant(1, 2.0)), 1.0);
  EXPECT_DOUBLE_EQ(objective(ds, 0.25, Vector::Constant(1, 1.0)), 0.75);
}

TEST(Objective, ZeroAtInterpolation) {
  Matrix X(3, 2);
  X << 1, 0, 1, 1, 1, 2;
  Vector y(3);
  y << 1, 3, 5;
  const auto ds = Dataset::create(X, y);
  Vector b(2);
  b << 1, 2;
  EXPECT_DOUBLE_EQ(objective(ds, 0.3, b), 0.0);
}

TEST(Objective, ShapeMismatch) {
  const auto ds = intercept_only({1, 2, 3});
  EXPECT_THROW(objective(ds, 0.5, Vector::Zero(2)), ShapeError);
}

TEST(Moment, Examples) {
  const auto ds = intercept_only({1, 2, 3});
  EXPECT_NEAR(moment(ds, 0.5, Vector::Constant(1, 2.0))(0), -1.0 / 6.0, 1e-15);
  EXPECT_NEAR(moment(ds, 0.5, Vector::Constant(1, 0.0))(0), 0.5, 1e-15);
}

TEST(Moment, BoundAtSolverOutput) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto ds = support::random_dataset(40 + 10 * static_cast<Index>(s), 1 + static_cast<Index>(s % 4), s);
    for (double tau : {0.1, 0.5, 0.9}) {
      const QrFit f = solve_qr(ds, tau);
      const double m = moment(ds, tau, f.beta).cwiseAbs().maxCoeff();
      EXPECT_LE(m, moment_bound(ds) * (1 + 1e-12)) << "seed " << s << " tau " << tau;
    }
  }
}

TEST(ValidateGrid, TailGuardWarnings) {
  EXPECT_EQ(validate_grid(QuantileGrid({0.05}), 1000, 10).size(), 1u);
  EXPECT_TRUE(validate_grid(QuantileGrid({0.01}), 50000, 20).empty());
  EXPECT_TRUE(validate_grid(QuantileGrid({0.2, 0.5, 0.8}), 1000, 10).empty());
}

TEST(ValidateGrid, RejectsBadGrids) {
  EXPECT_THROW(QuantileGrid({0.3, 0.2}), ValidationError);
  EXPECT_THROW(QuantileGrid({0.3, 0.3}), ValidationError);
  EXPECT_THROW(QuantileGrid({0.0, 0.5}), ValidationError);
  EXPECT_THROW(QuantileGrid({0.5, 1.0}), ValidationError);
  EXPECT_THROW(QuantileGrid(std::vector<double>{}), ValidationError);
}

TEST(QuantileGridSpec, RangeIsInclusiveAndSnapped) {
  const auto g = QuantileGrid::parse("0.01:0.99:0.01");
  ASSERT_EQ(g.size(), 99u);
  EXPECT_DOUBLE_EQ(g.front(), 0.01);
  EXPECT_DOUBLE_EQ(g.back(), 0.99);
  EXPECT_DOUBLE_EQ(g[49], 0.5);
  const auto l = QuantileGrid::parse("0.25,0.5,0.75");
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l.nearest(0.6), 1u);
  EXPECT_THROW(QuantileGrid::parse("0.1:0.9"), InputError);
}

TEST(InterpolateProcess, KnotsMidpointsAndRange) {
  CoefProcess p;
  p.grid = QuantileGrid({0.2, 0.4, 0.6});
  for (double t : p.grid.taus()) {
    QrFit f;
    f.tau = t;
    f.beta = Vector::Constant(2, t * 10.0);
    f.beta(1) = -t;
    p.fits.push_back(f);
  }
  EXPECT_EQ(interpolate_process(p, 0.4), p.fits[1].beta);
  const Vector mid = interpolate_process(p, 0.5);
  EXPECT_NEAR(mid(0), 5.0, 1e-12);
  EXPECT_NEAR(mid(1), -0.5, 1e-12);
  EXPECT_THROW(interpolate_process(p, 0.1), RangeError);
  EXPECT_THROW(interpolate_process(p, 0.7), RangeError);
}

TEST(LoadCsv, ShapesAndIntercept) {
  const auto path = temp_csv("ok", "y,a,b\n1,2,3\n2,5,1\n4,1,7\n0,3,3\n");
  const auto ds = load_csv(path, "y", true);
  EXPECT_EQ(ds.n(), 4);
  EXPECT_EQ(ds.k(), 3);
  EXPECT_EQ(ds.column_names().front(), "(Intercept)");
  EXPECT_DOUBLE_EQ(ds.X()(1, 1), 5.0);
  EXPECT_DOUBLE_EQ(ds.y()(2), 4.0);
  const auto no_int = load_csv(path, "y", false);
  EXPECT_EQ(no_int.k(), 2);
}

TEST(LoadCsv, NeedsMoreRowsThanColumns) {
  const auto path = temp_csv("short", "y,a,b\n1,2,3\n2,5,1\n4,1,7\n");
  EXPECT_THROW(load_csv(path, "y", true), SizeError);
}

TEST(LoadCsv, DuplicatedColumnIsRankError) {
  const auto path = temp_csv("dup", "y,a,b\n1,2,2\n2,5,5\n4,1,1\n3,0,0\n");
  EXPECT_THROW(load_csv(path, "y", true), RankError);
}

TEST(LoadCsv, MissingCellNamesTheRow) {
  const auto path = temp_csv("na", "y,a\n1,2\n2,NA\n4,1\n");
  try {
    load_csv(path, "y", true);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
  }
}

TEST(LoadCsv, UnknownResponse) {
  const auto path = temp_csv("resp", "y,a\n1,2\n2,3\n");
  EXPECT_THROW(load_csv(path, "z", true), InputError);
}

TEST(FormatDouble, RoundTripsExactly) {
  Engine64 rng(7);
  std::normal_distribution<double> z;
  for (int i = 0; i < 1000; ++i) {
    const double v = z(rng) * std::pow(10.0, static_cast<double>(i % 40 - 20));
    double back = 0.0;
    ASSERT_TRUE(detail::parse_double(detail::format_double(v), back));
    EXPECT_EQ(back, v);
  }
  EXPECT_EQ(detail::format_double(0.5), "0.5");
}
