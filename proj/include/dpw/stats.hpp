#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "dpw/error.hpp"

namespace dpw {

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  require(a > 0 && b > 0, Errc::invalid_argument, "incomplete_beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

inline double f_cdf(double f, double df1, double df2) {
  if (f <= 0.0) return 0.0;
  if (std::isinf(f)) return 1.0;
  return incomplete_beta(df1 / 2.0, df2 / 2.0, df1 * f / (df1 * f + df2));
}

/// Quantile of the F distribution: the f with f_cdf(f) = p.
inline double f_quantile(double p, double df1, double df2) {
  require(p > 0.0 && p < 1.0, Errc::invalid_argument, "f_quantile needs 0 < p < 1");
  require(df1 > 0 && df2 > 0, Errc::invalid_argument, "f_quantile needs positive degrees of freedom");
  double lo = 0.0, hi = 1.0;
  while (f_cdf(hi, df1, df2) < p) {
    lo = hi;
    hi *= 2.0;
    require(hi < 1e300, Errc::invalid_argument, "f_quantile failed to bracket");
  }
  for (int i = 0; i < 200 && hi - lo > 1e-13 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f_cdf(mid, df1, df2) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct AnovaResult {
  double f = 0.0;
  bool f_infinite = false;  // zero within-group variance with nonzero between-group variance
  std::size_t df_between = 0;
  std::size_t df_within = 0;
  double ss_between = 0.0;
  double ss_within = 0.0;
  double alpha = 0.05;
  double critical = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

/// One-way ANOVA across groups of scalar samples.
inline AnovaResult anova_oneway(const std::vector<std::vector<double>>& groups, double alpha = 0.05) {
  require(groups.size() >= 2, Errc::invalid_argument, "anova needs at least two groups");
  require(alpha > 0.0 && alpha < 1.0, Errc::invalid_argument, "anova alpha must lie in (0,1)");
  std::size_t n = 0;
  double total = 0.0, sumsq = 0.0;
  for (const auto& g : groups) {
    require(!g.empty(), Errc::invalid_argument, "anova groups must be non-empty");
    n += g.size();
    for (double v : g) {
      total += v;
      sumsq += v * v;
    }
  }
  require(n > groups.size(), Errc::invalid_argument, "anova needs more samples than groups");
  const double grand = total / static_cast<double>(n);

  AnovaResult r;
  r.alpha = alpha;
  r.df_between = groups.size() - 1;
  r.df_within = n - groups.size();
  for (const auto& g : groups) {
    double sum = 0.0;
    for (double v : g) sum += v;
    const double mean = sum / static_cast<double>(g.size());
    r.ss_between += static_cast<double>(g.size()) * (mean - grand) * (mean - grand);
    for (double v : g) r.ss_within += (v - mean) * (v - mean);
  }
  // Sums of squares below this are rounding residue of identical samples.
  const double scale = sumsq * 1e-20;
  if (r.ss_between <= scale) r.ss_between = 0.0;
  if (r.ss_within <= scale) {
    r.ss_within = 0.0;
    r.f_infinite = r.ss_between > scale;
    r.f = r.f_infinite ? std::numeric_limits<double>::infinity() : 0.0;
  } else {
    r.f = (r.ss_between / static_cast<double>(r.df_between)) / (r.ss_within / static_cast<double>(r.df_within));
  }
  r.critical = f_quantile(1.0 - alpha, static_cast<double>(r.df_between), static_cast<double>(r.df_within));
  r.p_value = r.f_infinite ? 0.0 : 1.0 - f_cdf(r.f, static_cast<double>(r.df_between), static_cast<double>(r.df_within));
  r.significant = r.f > r.critical;
  return r;
}

}  // namespace dpw
