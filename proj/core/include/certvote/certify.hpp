#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "certvote/ensemble.hpp"

namespace certvote {

enum class CertStatus { certified, abstain_low_pA, abstain_rank };

const char* cert_status_name(CertStatus s);

struct CertifyConfig {
  double sigma = 0.5;
  int n = 10000;          // counting draws
  double alpha = 0.05;    // confidence level of the lower bound
  std::uint64_t seed = 0;
  // Significance level for the rank-verification abstain flag; when absent
  // the flag is never raised.
  std::optional<double> rv_alpha;

  void validate() const;
};

struct Certificate {
  int label = kAbstainLabel;   // y_A from the selection draw
  double rv_pvalue = 1.0;      // p from the top-2 counts of that draw
  double p_lower = 0.0;        // one-sided Clopper-Pearson bound
  double radius = 0.0;         // L2 units of the input space
  CertStatus status = CertStatus::abstain_low_pA;
  CertifyConfig cfg;           // configuration the certificate was issued under
};

std::string certificate_to_json(const Certificate& c);

// Monte Carlo certification: one selection draw fixes y_A and the
// rank-verification p-value, n counting draws estimate the success
// probability, and the radius is sigma * inv_norm_cdf(p_lower) whenever
// p_lower exceeds 1/2 (zero otherwise, with abstain_low_pA). When the
// config carries rv_alpha and p >= rv_alpha the status is abstain_rank with
// the radius still reported. Deterministic given (cfg.seed, ensemble, x);
// counting draws may evaluate in parallel.
Certificate certify(const Ensemble& ens, const Tensor& x, const CertifyConfig& cfg);

// Statistical spot check: samples `trials` perturbations uniformly on the
// L2 sphere of radius cert.radius, evaluates a noisy query at the clipped
// perturbed input with the certification sigma, and returns the fraction
// that predicted cert.label. A zero-radius certificate is vacuously 1.
double empirical_radius_check(const Ensemble& ens, const Tensor& x,
                              const Certificate& cert, int trials,
                              std::uint64_t seed);

}  // namespace certvote
