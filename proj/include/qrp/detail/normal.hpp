#pragma once

#include <cmath>
#include <numbers>

#include <boost/math/distributions/normal.hpp>

namespace qrp::detail {

inline double norm_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double norm_quantile(double p) {
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(standard, p);
}

/// Two-sided upper tail probability 2 * (1 - Phi(|x|)).
inline double norm_two_sided_p(double x) { return std::erfc(std::abs(x) / std::sqrt(2.0)); }

}  // namespace qrp::detail
