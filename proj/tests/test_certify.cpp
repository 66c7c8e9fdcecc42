#include <doctest.h>

#include <cmath>
#include <json.hpp>

#include "certvote/certify.hpp"
#include "certvote/errors.hpp"
#include "certvote/stats.hpp"
#include "oracles.hpp"

using namespace certvote;

namespace {

Ensemble constant_ensemble(int label, std::size_t members, std::size_t label_count,
                           std::size_t dim = 6) {
  Ensemble ens;
  ens.label_count = label_count;
  for (std::size_t i = 0; i < members; ++i) {
    ens.members.push_back(oracles::constant_network(dim, label_count, label));
  }
  return ens;
}

}  // namespace

TEST_SUITE("certify") {

TEST_CASE("constant classifier: radius matches the composed oracles") {
  const Ensemble ens = constant_ensemble(3, 5, 10);
  const Tensor x = oracles::random_unit_tensor({6}, 1);
  CertifyConfig cfg;
  cfg.sigma = 0.5;
  cfg.n = 100;
  cfg.alpha = 0.05;
  cfg.seed = 7;
  const Certificate cert = certify(ens, x, cfg);

  CHECK(cert.label == 3);
  CHECK(cert.status == CertStatus::certified);
  // Every draw votes 3, so n_A = n and the bound collapses to alpha^(1/n).
  const double p_oracle = oracles::cp_lower_all_success(100, 0.05);
  CHECK(std::abs(cert.p_lower - p_oracle) < 1e-9);
  const double r_oracle = 0.5 * oracles::bisect_inv_norm(p_oracle);
  CHECK(std::abs(cert.radius - r_oracle) < 1e-4);
  // 0.5 * inv_norm_cdf(0.05^0.01) = 0.9439994...
  CHECK(cert.radius == doctest::Approx(0.944).epsilon(1e-3));
  // Unanimous selection draw: 5-0 gives the smallest possible p-value.
  CHECK(cert.rv_pvalue == doctest::Approx(0.0625).epsilon(1e-12));
}

TEST_CASE("radius is exactly linear in sigma for a pinned count") {
  const Ensemble ens = constant_ensemble(2, 4, 5);
  const Tensor x = oracles::random_unit_tensor({6}, 2);
  CertifyConfig cfg;
  cfg.n = 200;
  cfg.alpha = 0.05;
  cfg.seed = 9;
  cfg.sigma = 0.37;
  const Certificate a = certify(ens, x, cfg);
  cfg.sigma = 0.74;
  const Certificate b = certify(ens, x, cfg);
  CHECK(a.p_lower == b.p_lower);  // constant votes, identical counts
  CHECK(b.radius == 2.0 * a.radius);
}

TEST_CASE("fixed p_lower values map through the quantile") {
  // R = sigma * inv_norm_cdf(p_lower); p = 0.6 at sigma 0.5.
  CHECK(0.5 * stats::inv_norm_cdf(0.6) == doctest::Approx(0.126674).epsilon(1e-4));
}

TEST_CASE("an even coin forces abstain_low_pA with radius zero") {
  Ensemble ens;
  ens.label_count = 2;
  for (int i = 0; i < 4; ++i) ens.members.push_back(oracles::coin_network(6));
  Tensor x = Tensor::zeros({6});
  for (double& v : x.data) v = 0.5;

  CertifyConfig cfg;
  cfg.sigma = 0.5;
  cfg.n = 400;
  cfg.alpha = 0.05;
  cfg.seed = 3;
  const Certificate cert = certify(ens, x, cfg);
  CHECK(cert.status == CertStatus::abstain_low_pA);
  CHECK(cert.radius == 0.0);
  CHECK(cert.p_lower <= 0.5);
}

TEST_CASE("status machine: abstain_low_pA iff p_lower <= 1/2 iff radius zero") {
  // Mixed-member stubs across several splits.
  for (int favored_members = 1; favored_members <= 6; ++favored_members) {
    Ensemble ens;
    ens.label_count = 4;
    for (int i = 0; i < 6; ++i) {
      ens.members.push_back(
          oracles::constant_network(6, 4, i < favored_members ? 1 : (i % 3 == 0 ? 2 : 3)));
    }
    const Tensor x = oracles::random_unit_tensor({6}, 50 + favored_members);
    CertifyConfig cfg;
    cfg.sigma = 0.25;
    cfg.n = 64;
    cfg.alpha = 0.05;
    cfg.seed = 100 + favored_members;
    const Certificate cert = certify(ens, x, cfg);
    CHECK((cert.status == CertStatus::abstain_low_pA) == (cert.p_lower <= 0.5));
    CHECK((cert.radius == 0.0) == (cert.p_lower <= 0.5));
  }
}

TEST_CASE("abstain_rank flags unverifiable selections, radius still reported") {
  // 3-vs-3 stub split: the selection draw's top-2 p-value is 1.
  Ensemble ens;
  ens.label_count = 4;
  for (int i = 0; i < 6; ++i) {
    ens.members.push_back(oracles::constant_network(6, 4, i < 3 ? 1 : 0));
  }
  const Tensor x = oracles::random_unit_tensor({6}, 4);
  CertifyConfig cfg;
  cfg.sigma = 0.5;
  cfg.n = 100;
  cfg.alpha = 0.05;
  cfg.seed = 5;
  cfg.rv_alpha = 0.05;
  const Certificate cert = certify(ens, x, cfg);
  // The tie-break fixes y_A = 0 on every draw, so counting still succeeds.
  CHECK(cert.label == 0);
  CHECK(cert.rv_pvalue == doctest::Approx(1.0));
  CHECK(cert.status == CertStatus::abstain_rank);
  CHECK(cert.radius > 0.0);
}

TEST_CASE("certify is deterministic in the seed") {
  const Ensemble ens = constant_ensemble(1, 3, 4);
  const Tensor x = oracles::random_unit_tensor({6}, 8);
  CertifyConfig cfg;
  cfg.sigma = 0.4;
  cfg.n = 150;
  cfg.alpha = 0.1;
  cfg.seed = 77;
  const Certificate a = certify(ens, x, cfg);
  const Certificate b = certify(ens, x, cfg);
  CHECK(a.p_lower == b.p_lower);
  CHECK(a.radius == b.radius);
  CHECK(a.rv_pvalue == b.rv_pvalue);

  // Single-threaded execution must reproduce the same certificate: every
  // counting draw owns a generator derived from (seed, i).
  setenv("CERTVOTE_THREADS", "1", 1);
  const Certificate serial = certify(ens, x, cfg);
  unsetenv("CERTVOTE_THREADS");
  CHECK(serial.p_lower == a.p_lower);
  CHECK(serial.radius == a.radius);
}

TEST_CASE("coverage sanity of the lower bound at q = 0.8") {
  // Simulate 500 binomial draws at q = 0.8, n = 200; the bound should stay
  // below q in at least (1 - alpha) - 0.03 of them.
  rng::Stream stream(31);
  const int draws = 500;
  int covered = 0;
  for (int d = 0; d < draws; ++d) {
    int successes = 0;
    for (int i = 0; i < 200; ++i) {
      if (stream.next_unit() < 0.8) ++successes;
    }
    if (stats::clopper_pearson_lower(successes, 200, 0.05) <= 0.8) ++covered;
  }
  CHECK(static_cast<double>(covered) / draws >= 0.95 - 0.03);
}

TEST_CASE("empirical_radius_check: constant classifier holds everywhere") {
  const Ensemble ens = constant_ensemble(2, 5, 6);
  const Tensor x = oracles::random_unit_tensor({6}, 10);
  CertifyConfig cfg;
  cfg.sigma = 0.5;
  cfg.n = 100;
  cfg.alpha = 0.05;
  cfg.seed = 11;
  const Certificate cert = certify(ens, x, cfg);
  REQUIRE(cert.status == CertStatus::certified);
  CHECK(empirical_radius_check(ens, x, cert, 64, 12) == 1.0);
}

TEST_CASE("empirical_radius_check: zero radius is vacuous") {
  Certificate cert;
  cert.radius = 0.0;
  cert.cfg.sigma = 0.5;
  const Ensemble ens = constant_ensemble(0, 2, 3);
  const Tensor x = oracles::random_unit_tensor({6}, 13);
  CHECK(empirical_radius_check(ens, x, cert, 10, 1) == 1.0);
}

TEST_CASE("certificate JSON carries all fields plus the config") {
  const Ensemble ens = constant_ensemble(1, 3, 4);
  const Tensor x = oracles::random_unit_tensor({6}, 14);
  CertifyConfig cfg;
  cfg.sigma = 0.5;
  cfg.n = 50;
  cfg.alpha = 0.05;
  cfg.seed = 15;
  const Certificate cert = certify(ens, x, cfg);
  const nlohmann::json j = nlohmann::json::parse(certificate_to_json(cert));
  CHECK(j.at("label") == 1);
  CHECK(j.at("status") == "certified");
  CHECK(j.at("cfg").at("n") == 50);
  CHECK(j.at("cfg").at("sigma") == doctest::Approx(0.5));
  CHECK(j.at("radius").get<double>() > 0.0);
}

TEST_CASE("config validation") {
  CertifyConfig cfg;
  cfg.sigma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.sigma = 0.5;
  cfg.n = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.n = 10;
  cfg.alpha = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

}  // TEST_SUITE
