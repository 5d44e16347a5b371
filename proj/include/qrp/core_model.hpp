#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qrp/errors.hpp"

namespace qrp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Singular values below this multiple of the largest deem X rank-deficient.
inline constexpr double kRankTolerance = 1e-10;

/// Ratio of smallest to largest singular value of X (0 for an empty matrix).
/// Uses a thin QR first so the SVD only sees a k x k triangle.
inline double singular_value_ratio(const Matrix& X) {
  if (X.rows() == 0 || X.cols() == 0) return 0.0;
  Matrix R;
  if (X.rows() > X.cols()) {
    Eigen::HouseholderQR<Matrix> qr(X);
    R = qr.matrixQR().topRows(X.cols()).triangularView<Eigen::Upper>();
  } else {
    R = X;
  }
  Eigen::JacobiSVD<Matrix> svd(R);
  const auto& sv = svd.singularValues();
  if (sv.size() < X.cols() || sv(0) <= 0.0) return 0.0;
  return sv(sv.size() - 1) / sv(0);
}

inline bool has_full_column_rank(const Matrix& X) {
  return X.rows() >= X.cols() && singular_value_ratio(X) >= kRankTolerance;
}

/// Immutable regression data: response y (n) and design X (n x k).
/// The intercept, when present, is an explicit column of ones.
class Dataset {
 public:
  /// Validates n >= k+1, finiteness and full column rank.
  static Dataset create(Matrix X, Vector y, std::vector<std::string> names = {}) {
    Dataset ds = unchecked(std::move(X), std::move(y), std::move(names));
    if (ds.n() < ds.k() + 1)
      throw SizeError("dataset needs n >= k+1 (n=" + std::to_string(ds.n()) +
                      ", k=" + std::to_string(ds.k()) + ")");
    if (!ds.X_.allFinite() || !ds.y_.allFinite())
      throw ValidationError("dataset contains non-finite values");
    if (!has_full_column_rank(ds.X_))
      throw RankError("design matrix is rank-deficient (singular value ratio " +
                      std::to_string(singular_value_ratio(ds.X_)) + ")");
    return ds;
  }

  /// Shape checks only. Used for resampled data whose rank is not guaranteed.
  static Dataset unchecked(Matrix X, Vector y, std::vector<std::string> names = {}) {
    if (X.rows() != y.size())
      throw ShapeError("X has " + std::to_string(X.rows()) + " rows but y has " +
                       std::to_string(y.size()));
    if (X.cols() == 0) throw ShapeError("design matrix has no columns");
    if (names.empty()) {
      names.reserve(static_cast<std::size_t>(X.cols()));
      for (Index j = 0; j < X.cols(); ++j) names.push_back("x" + std::to_string(j));
    }
    if (static_cast<Index>(names.size()) != X.cols())
      throw ShapeError("column name count does not match X");
    Dataset ds;
    ds.X_ = std::move(X);
    ds.y_ = std::move(y);
    ds.names_ = std::move(names);
    return ds;
  }

  const Matrix& X() const noexcept { return X_; }
  const Vector& y() const noexcept { return y_; }
  const std::vector<std::string>& column_names() const noexcept { return names_; }
  Index n() const noexcept { return y_.size(); }
  Index k() const noexcept { return X_.cols(); }

  /// Largest |x_ij|, the scale used by the moment bound k * max|x| / n.
  double max_abs_x() const { return X_.cwiseAbs().maxCoeff(); }

 private:
  Dataset() = default;
  Matrix X_;
  Vector y_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Quantile grids

class QuantileGrid {
 public:
  QuantileGrid() = default;

  explicit QuantileGrid(std::vector<double> taus) : taus_(std::move(taus)) {
    if (taus_.empty()) throw ValidationError("quantile grid is empty");
    for (std::size_t j = 0; j < taus_.size(); ++j) {
      const double t = taus_[j];
      if (!(t > 0.0 && t < 1.0))
        throw ValidationError("quantile index " + std::to_string(t) + " outside (0,1)");
      if (j > 0 && !(t > taus_[j - 1]))
        throw ValidationError("quantile grid is not strictly increasing at position " +
                              std::to_string(j));
    }
  }

  const std::vector<double>& taus() const noexcept { return taus_; }
  std::size_t size() const noexcept { return taus_.size(); }
  double operator[](std::size_t j) const { return taus_[j]; }
  double front() const { return taus_.front(); }
  double back() const { return taus_.back(); }

  /// Largest gap between adjacent grid points (0 for a single point).
  double mesh() const {
    double m = 0.0;
    for (std::size_t j = 1; j < taus_.size(); ++j) m = std::max(m, taus_[j] - taus_[j - 1]);
    return m;
  }

  /// Position of the grid point nearest to tau (lower one on ties).
  std::size_t nearest(double tau) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < taus_.size(); ++j)
      if (std::abs(taus_[j] - tau) < std::abs(taus_[best] - tau) - 1e-15) best = j;
    return best;
  }

  /// Inclusive arithmetic sequence; the last point snaps to `stop` within 1e-12.
  static QuantileGrid range(double start, double stop, double step) {
    if (!(step > 0.0)) throw ValidationError("grid step must be positive");
    if (stop < start - 1e-12) throw ValidationError("grid stop is below start");
    std::vector<double> taus;
    const auto count = static_cast<long>(std::floor((stop - start) / step + 1e-12)) + 1;
    for (long i = 0; i < count; ++i) {
      double t = start + static_cast<double>(i) * step;
      if (std::abs(t - stop) <= 1e-12) t = stop;
      // Round away representation noise so 0.1:0.9:0.1 yields 0.3, not 0.30000000000000004.
      t = std::round(t * 1e12) / 1e12;
      taus.push_back(t);
    }
    return QuantileGrid(std::move(taus));
  }

  /// Parses "a:b:s" or a comma separated list.
  static QuantileGrid parse(std::string_view spec) {
    auto to_double = [&](std::string_view s) {
      while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
      while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
      double v = 0.0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw ValidationError("cannot parse grid value '" + std::string(s) + "'");
      return v;
    };
    if (spec.find(':') != std::string_view::npos) {
      std::vector<double> parts;
      std::size_t pos = 0;
      while (true) {
        const auto next = spec.find(':', pos);
        parts.push_back(to_double(spec.substr(pos, next - pos)));
        if (next == std::string_view::npos) break;
        pos = next + 1;
      }
      if (parts.size() != 3) throw ValidationError("grid spec must be start:stop:step");
      return range(parts[0], parts[1], parts[2]);
    }
    std::vector<double> taus;
    std::size_t pos = 0;
    while (true) {
      const auto next = spec.find(',', pos);
      taus.push_back(to_double(spec.substr(pos, next - pos)));
      if (next == std::string_view::npos) break;
      pos = next + 1;
    }
    return QuantileGrid(std::move(taus));
  }

 private:
  std::vector<double> taus_;
};

struct GridWarning {
  double tau;
  double guard;  // 15 k / n
  std::string message;
};

/// Tail guard: a quantile is only trusted when tau and 1-tau both exceed 15k/n.
/// Never rejects; the grid itself was validated on construction.
inline std::vector<GridWarning> validate_grid(const QuantileGrid& grid, Index n, Index k) {
  if (grid.size() == 0) throw ValidationError("quantile grid is empty");
  if (n <= 0 || k <= 0) throw DomainError("validate_grid needs positive n and k");
  const double guard = 15.0 * static_cast<double>(k) / static_cast<double>(n);
  std::vector<GridWarning> out;
  for (double t : grid.taus()) {
    if (t < guard || 1.0 - t < guard) {
      std::ostringstream msg;
      msg << "tau=" << t << " lies within the tail guard 15k/n=" << guard
          << "; estimates there may be unreliable";
      out.push_back({t, guard, msg.str()});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fits and processes

enum class Engine { baseline, preprocess, onestep, globbed };

inline std::string to_string(Engine e) {
  switch (e) {
    case Engine::baseline: return "baseline";
    case Engine::preprocess: return "preprocess";
    case Engine::onestep: return "onestep";
    case Engine::globbed: return "globbed";
  }
  return "unknown";
}

inline Engine engine_from_string(std::string_view s) {
  if (s == "baseline") return Engine::baseline;
  if (s == "preprocess") return Engine::preprocess;
  if (s == "onestep") return Engine::onestep;
  if (s == "globbed") return Engine::globbed;
  throw ValidationError("unknown engine '" + std::string(s) + "'");
}

struct QrFit {
  double tau = 0.5;
  Vector beta;
  double objective = 0.0;
  double moment_inf_norm = 0.0;
  Engine engine = Engine::baseline;
  int iterations = 0;  // interior-point iterations summed over all solves
  int fixups = 0;      // preprocessing re-solves after the first
  // Diagnostics beyond the core contract.
  int restarts = 0;        // restarts with a doubled window
  Index kept = 0;          // rows in the last reduced problem (n for full solves)
  bool fell_back = false;  // preprocessing gave up and ran the full solve
  bool certified = false;  // basic solution verified optimal by the dual check
};

/// Kernel estimate of the density-weighted Gram matrix at one quantile.
struct JacobianEstimate {
  double tau = 0.5;
  double h = 0.0;  // bandwidth in residual units
  Matrix J_hat;
  double min_eigenvalue = 0.0;
};

struct CoefProcess {
  QuantileGrid grid;
  std::vector<QrFit> fits;
  std::vector<std::optional<JacobianEstimate>> jacobians;

  std::size_t size() const noexcept { return fits.size(); }
  Index k() const { return fits.empty() ? 0 : fits.front().beta.size(); }

  /// J x k matrix of coefficients, one row per grid point.
  Matrix coefficients() const {
    Matrix B(static_cast<Index>(fits.size()), k());
    for (std::size_t j = 0; j < fits.size(); ++j) B.row(static_cast<Index>(j)) = fits[j].beta.transpose();
    return B;
  }

  bool has_all_jacobians() const {
    return jacobians.size() == fits.size() &&
           std::all_of(jacobians.begin(), jacobians.end(), [](const auto& j) { return j.has_value(); });
  }
};

// ---------------------------------------------------------------------------
// Check loss, objective, moment

inline void require_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw DomainError("quantile index " + std::to_string(tau) + " outside (0,1)");
}

inline double check_loss(double tau, double u) {
  require_tau(tau);
  return (tau - (u <= 0.0 ? 1.0 : 0.0)) * u;
}

namespace detail {
// No domain check; callers validate tau once.
inline double rho(double tau, double u) noexcept { return u > 0.0 ? tau * u : (tau - 1.0) * u; }

inline double sum_rho(double tau, const Vector& r) noexcept {
  double s = 0.0;
  for (Index i = 0; i < r.size(); ++i) s += rho(tau, r(i));
  return s;
}
}  // namespace detail

inline double objective(const Matrix& X, const Vector& y, double tau, const Vector& beta) {
  require_tau(tau);
  if (beta.size() != X.cols() || X.rows() != y.size())
    throw ShapeError("objective: dimension mismatch");
  if (!beta.allFinite()) throw DomainError("objective: beta is not finite");
  const Vector r = y - X * beta;
  return detail::sum_rho(tau, r);
}

inline double objective(const Dataset& ds, double tau, const Vector& beta) {
  return objective(ds.X(), ds.y(), tau, beta);
}

namespace detail {
/// (1/n) X'(tau - 1(r <= 0)) given residuals r = y - X beta.
inline Vector moment_from_residuals(const Matrix& X, const Vector& r, double tau) {
  Vector psi(r.size());
  for (Index i = 0; i < r.size(); ++i) psi(i) = tau - (r(i) <= 0.0 ? 1.0 : 0.0);
  return X.transpose() * psi / static_cast<double>(r.size());
}
}  // namespace detail

inline Vector moment(const Matrix& X, const Vector& y, double tau, const Vector& beta) {
  require_tau(tau);
  if (beta.size() != X.cols() || X.rows() != y.size())
    throw ShapeError("moment: dimension mismatch");
  if (!beta.allFinite()) throw DomainError("moment: beta is not finite");
  const Vector r = y - X * beta;
  return detail::moment_from_residuals(X, r, tau);
}

inline Vector moment(const Dataset& ds, double tau, const Vector& beta) {
  return moment(ds.X(), ds.y(), tau, beta);
}

/// Bound k * max|x_ij| / n on the moment at an exact solution with at most k
/// zero residuals. With z > k zero residuals the bound is z * max|x_ij| / n.
inline double moment_bound(const Matrix& X) {
  return static_cast<double>(X.cols()) * X.cwiseAbs().maxCoeff() / static_cast<double>(X.rows());
}

inline double moment_bound(const Dataset& ds) { return moment_bound(ds.X()); }

/// Component-wise linear interpolation of the coefficient process.
inline Vector interpolate_process(const CoefProcess& proc, double tau) {
  const auto& taus = proc.grid.taus();
  if (taus.empty() || proc.fits.size() != taus.size())
    throw ValidationError("interpolate_process: process is empty or misaligned");
  if (tau < taus.front() || tau > taus.back())
    throw RangeError("tau " + std::to_string(tau) + " outside the grid span [" +
                     std::to_string(taus.front()) + ", " + std::to_string(taus.back()) + "]");
  const auto it = std::lower_bound(taus.begin(), taus.end(), tau);
  const auto hi = static_cast<std::size_t>(it - taus.begin());
  if (taus[hi] == tau) return proc.fits[hi].beta;
  const std::size_t lo = hi - 1;
  const double w = (tau - taus[lo]) / (taus[hi] - taus[lo]);
  return (1.0 - w) * proc.fits[lo].beta + w * proc.fits[hi].beta;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {
inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    const auto next = line.find(',', pos);
    cells.push_back(line.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string unquote(std::string_view s) {
  s = trim(s);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
}
}  // namespace detail

/// Reads a numeric CSV with one header row. Every column other than the
/// response becomes a covariate, in file order; a ones column named
/// "(Intercept)" is prepended when `intercept` is set.
inline Dataset load_csv(const std::string& path, const std::string& response_column,
                        bool intercept = true) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("'" + path + "' has no header row", 0);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  std::vector<std::string> header;
  for (auto cell : detail::split_csv_line(line)) header.push_back(detail::unquote(cell));
  const auto resp_it = std::find(header.begin(), header.end(), response_column);
  if (resp_it == header.end())
    throw ParseError("response column '" + response_column + "' not in header", 0);
  const auto resp = static_cast<std::size_t>(resp_it - header.begin());

  std::vector<std::string> names;
  if (intercept) names.emplace_back("(Intercept)");
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != resp) names.push_back(header[c]);

  std::vector<double> yv;
  std::vector<double> xv;  // row-major
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                           " cells, expected " + std::to_string(header.size()),
                       row);
    if (intercept) xv.push_back(1.0);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v = 0.0;
      if (!detail::parse_double(cells[c], v))
        throw ParseError("row " + std::to_string(row) + ", column '" + header[c] +
                             "': non-numeric cell '" + std::string(detail::trim(cells[c])) + "'",
                         row);
      if (c == resp)
        yv.push_back(v);
      else
        xv.push_back(v);
    }
  }
  const auto n = static_cast<Index>(yv.size());
  const auto k = static_cast<Index>(names.size());
  Matrix X(n, k);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) X(i, j) = xv[static_cast<std::size_t>(i * k + j)];
  Vector y = Eigen::Map<const Vector>(yv.data(), n);
  return Dataset::create(std::move(X), std::move(y), std::move(names));
}

}  // namespace qrp
