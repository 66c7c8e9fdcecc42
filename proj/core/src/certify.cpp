#include "certvote/certify.hpp"

#include <cmath>
#include <json.hpp>
#include <vector>

#include "certvote/errors.hpp"
#include "certvote/parallel.hpp"
#include "certvote/rng.hpp"
#include "certvote/stats.hpp"

namespace certvote {

namespace {

constexpr std::uint64_t kSelectionTag = 0xce01;
constexpr std::uint64_t kCountingTag = 0xce02;
constexpr std::uint64_t kSphereTag = 0xce03;

Tensor gaussian_perturbed(const Tensor& x, double sigma, rng::Stream& stream) {
  Tensor out = x;
  for (double& v : out.data) v += sigma * stream.next_gaussian();
  return clip01(std::move(out));
}

}  // namespace

const char* cert_status_name(CertStatus s) {
  switch (s) {
    case CertStatus::certified: return "certified";
    case CertStatus::abstain_low_pA: return "abstain_low_pA";
    case CertStatus::abstain_rank: return "abstain_rank";
  }
  return "unknown";
}

void CertifyConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("certify: sigma must be positive");
  if (n < 1) throw ConfigError("certify: n must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("certify: alpha outside (0, 1)");
  if (rv_alpha.has_value() && !(*rv_alpha > 0.0 && *rv_alpha < 1.0)) {
    throw ConfigError("certify: rv_alpha outside (0, 1)");
  }
}

std::string certificate_to_json(const Certificate& c) {
  nlohmann::json j;
  if (c.label == kAbstainLabel) {
    j["label"] = "abstain";
  } else {
    j["label"] = c.label;
  }
  j["rv_pvalue"] = c.rv_pvalue;
  j["p_lower"] = c.p_lower;
  j["radius"] = c.radius;
  j["status"] = cert_status_name(c.status);
  j["cfg"] = {{"sigma", c.cfg.sigma},
              {"n", c.cfg.n},
              {"alpha", c.cfg.alpha},
              {"seed", c.cfg.seed},
              {"rv_alpha", c.cfg.rv_alpha.has_value()
                               ? nlohmann::json(*c.cfg.rv_alpha)
                               : nlohmann::json(nullptr)}};
  return j.dump();
}

Certificate certify(const Ensemble& ens, const Tensor& x, const CertifyConfig& cfg) {
  cfg.validate();
  ens.validate();

  Certificate cert;
  cert.cfg = cfg;

  // Selection draw: top-2 classes and the rank-verification p-value.
  rng::Stream selection(rng::derive(cfg.seed, kSelectionTag));
  const VoteResult first = vote(ens, gaussian_perturbed(x, cfg.sigma, selection));
  cert.label = first.top_label;
  cert.rv_pvalue =
      rank_verify(first.top_count, first.runner_up_count, 0.5).pvalue;

  // Counting draws; each uses a generator derived from (seed, i) so the
  // count is schedule-independent.
  std::vector<unsigned char> hit(static_cast<std::size_t>(cfg.n), 0);
  parallel_for(static_cast<std::size_t>(cfg.n), [&](std::size_t i) {
    rng::Stream stream(rng::derive(rng::derive(cfg.seed, kCountingTag), i));
    const VoteResult r = vote(ens, gaussian_perturbed(x, cfg.sigma, stream));
    hit[i] = r.label == cert.label ? 1 : 0;
  });
  std::int64_t successes = 0;
  for (unsigned char h : hit) successes += h;

  cert.p_lower = stats::clopper_pearson_lower(successes, cfg.n, cfg.alpha);

  if (cert.p_lower <= 0.5) {
    cert.radius = 0.0;
    cert.status = CertStatus::abstain_low_pA;
    return cert;
  }
  cert.radius = cfg.sigma * stats::inv_norm_cdf(cert.p_lower);
  cert.status = (cfg.rv_alpha.has_value() && cert.rv_pvalue >= *cfg.rv_alpha)
                    ? CertStatus::abstain_rank
                    : CertStatus::certified;
  return cert;
}

double empirical_radius_check(const Ensemble& ens, const Tensor& x,
                              const Certificate& cert, int trials,
                              std::uint64_t seed) {
  if (trials < 1) throw ConfigError("empirical_radius_check: trials must be >= 1");
  if (cert.radius == 0.0) return 1.0;

  QueryPolicy policy;
  policy.noise_sigma = cert.cfg.sigma;
  policy.seed = rng::derive(seed, 0x9e);

  std::vector<unsigned char> hit(static_cast<std::size_t>(trials), 0);
  parallel_for(static_cast<std::size_t>(trials), [&](std::size_t t) {
    rng::Stream stream(rng::derive(rng::derive(seed, kSphereTag), t));
    // Uniform direction on the L2 sphere of radius cert.radius.
    Tensor delta = Tensor::zeros(x.shape);
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& v : delta.data) {
        v = stream.next_gaussian();
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double scale = cert.radius / std::sqrt(norm2);
    Tensor probe = x;
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] += scale * delta[i];
    const VoteResult r = noisy_query(ens, clip01(std::move(probe)), policy, t);
    hit[t] = r.label == cert.label ? 1 : 0;
  });

  std::int64_t matches = 0;
  for (unsigned char h : hit) matches += h;
  return static_cast<double>(matches) / static_cast<double>(trials);
}

}  // namespace certvote
