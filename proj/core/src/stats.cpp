#include "certvote/stats.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "certvote/errors.hpp"

namespace certvote::stats {

namespace {

// Acklam's coefficients for the rational approximation of the normal
// quantile (central region plus two tails), peak error ~1.15e-9 before
// refinement.
constexpr double kA[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                          -2.759285104469687e+02, 1.383577518672690e+02,
                          -3.066479806614716e+01, 2.506628277459239e+00};
constexpr double kB[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                          -1.556989798598866e+02, 6.680131188771972e+01,
                          -1.328068155288572e+01};
constexpr double kC[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                          -2.400758277161838e+00, -2.549732539343734e+00,
                          4.374664141464968e+00,  2.938163982698783e+00};
constexpr double kD[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                          2.445134137142996e+00, 3.754408661907416e+00};

double acklam_estimate(double p) {
  constexpr double p_low = 0.02425;
  constexpr double p_high = 1.0 - p_low;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((kC[0] * q + kC[1]) * q + kC[2]) * q + kC[3]) * q + kC[4]) * q + kC[5]) /
           ((((kD[0] * q + kD[1]) * q + kD[2]) * q + kD[3]) * q + 1.0);
  }
  if (p > p_high) {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((kC[0] * q + kC[1]) * q + kC[2]) * q + kC[3]) * q + kC[4]) * q + kC[5]) /
           ((((kD[0] * q + kD[1]) * q + kD[2]) * q + kD[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((kA[0] * r + kA[1]) * r + kA[2]) * r + kA[3]) * r + kA[4]) * r + kA[5]) * q /
         (((((kB[0] * r + kB[1]) * r + kB[2]) * r + kB[3]) * r + kB[4]) * r + 1.0);
}

// Binomial pmf row C(n, j) / 2^n. The Pascal recurrence keeps every
// coefficient an exact double for n <= 52, which the two-sided test relies
// on for its exact rational values at small n.
std::vector<double> half_binom_pmf_row(std::int64_t n) {
  std::vector<double> coeff(static_cast<std::size_t>(n) + 1, 0.0);
  coeff[0] = 1.0;
  for (std::int64_t row = 1; row <= n; ++row) {
    for (std::int64_t j = row; j >= 1; --j) coeff[j] += coeff[j - 1];
  }
  const double scale = std::ldexp(1.0, -static_cast<int>(n));
  for (double& c : coeff) c *= scale;
  return coeff;
}

std::vector<double> half_binom_pmf_row_lgamma(std::int64_t n) {
  std::vector<double> pmf(static_cast<std::size_t>(n) + 1, 0.0);
  const double log_half_n = -static_cast<double>(n) * std::log(2.0);
  const double lg_n1 = std::lgamma(static_cast<double>(n) + 1.0);
  for (std::int64_t j = 0; j <= n; ++j) {
    const double lg = lg_n1 - std::lgamma(static_cast<double>(j) + 1.0) -
                      std::lgamma(static_cast<double>(n - j) + 1.0);
    pmf[j] = std::exp(lg + log_half_n);
  }
  return pmf;
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3.0e-16;
  constexpr double kFpMin = 1.0e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double norm_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double inv_norm_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw ConfigError("inv_norm_cdf: p must lie strictly inside (0, 1)");
  }
  double x = acklam_estimate(p);
  // One Newton step against the erfc-based CDF.
  const double err = norm_cdf(x) - p;
  const double pdf = norm_pdf(x);
  if (pdf > 0.0) x -= err / pdf;
  return x;
}

double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw ConfigError("incomplete_beta: x outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * beta_cf(a, b, x) / a;
  }
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double binomial_tail_geq(std::int64_t k, std::int64_t n, double p) {
  if (n < 1 || k < 0 || k > n) throw ConfigError("binomial_tail_geq: invalid counts");
  if (p < 0.0 || p > 1.0) throw ConfigError("binomial_tail_geq: p outside [0, 1]");
  if (k == 0) return 1.0;
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;
  // P(X >= k) = I_p(k, n - k + 1)
  return incomplete_beta(static_cast<double>(k), static_cast<double>(n - k + 1), p);
}

double binom_test_two_sided_half(std::int64_t successes, std::int64_t n) {
  if (n < 1 || successes < 0 || successes > n) {
    throw ConfigError("binom_test: invalid counts");
  }
  const std::vector<double> pmf =
      n <= 500 ? half_binom_pmf_row(n) : half_binom_pmf_row_lgamma(n);
  const double observed = pmf[static_cast<std::size_t>(successes)];
  const double cutoff = observed * (1.0 + 1e-9);
  double pvalue = 0.0;
  for (double q : pmf) {
    if (q <= cutoff) pvalue += q;
  }
  return pvalue < 1.0 ? pvalue : 1.0;
}

double clopper_pearson_lower(std::int64_t successes, std::int64_t n, double alpha) {
  if (n < 1 || successes < 0 || successes > n) {
    throw ConfigError("clopper_pearson_lower: invalid counts");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("clopper_pearson_lower: alpha outside (0, 1)");
  }
  if (successes == 0) return 0.0;
  // The tail P(Bin(n, q) >= k) increases monotonically in q from 0 to 1,
  // so the bound is the unique root of tail(q) = alpha.
  double lo = 0.0;
  double hi = 1.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_tail_geq(successes, n, mid) <= alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-15) break;
  }
  return lo;
}

}  // namespace certvote::stats
