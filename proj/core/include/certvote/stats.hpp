#pragma once

#include <cstdint>

namespace certvote::stats {

// Standard normal CDF, Phi(x) = 0.5 * erfc(-x / sqrt(2)).
double norm_cdf(double x);

// Standard normal density.
double norm_pdf(double x);

// Inverse standard normal CDF on (0, 1). Acklam's rational approximation
// refined with one Newton step against the erfc-based CDF; absolute error
// well below 1e-9 across the domain. Throws ConfigError outside (0, 1).
double inv_norm_cdf(double p);

// Regularized incomplete beta function I_x(a, b), continued-fraction
// evaluation (Lentz). Needed for binomial tail probabilities at large n.
double incomplete_beta(double a, double b, double x);

// P(Bin(n, p) >= k), exact through the incomplete beta identity.
double binomial_tail_geq(std::int64_t k, std::int64_t n, double p);

// Exact two-sided binomial test against success probability 1/2: the sum of
// the probabilities of all outcomes no more likely than the observed count
// ("minlike" convention). successes in [0, n], n >= 1.
double binom_test_two_sided_half(std::int64_t successes, std::int64_t n);

// One-sided lower (1 - alpha) Clopper-Pearson bound: the largest q with
// P(Bin(n, q) >= successes) <= alpha, found by bisection on the binomial
// tail. Returns 0 when successes == 0.
double clopper_pearson_lower(std::int64_t successes, std::int64_t n, double alpha);

}  // namespace certvote::stats
