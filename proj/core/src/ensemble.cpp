#include "certvote/ensemble.hpp"

#include <algorithm>
#include <json.hpp>

#include "certvote/errors.hpp"
#include "certvote/parallel.hpp"
#include "certvote/rng.hpp"
#include "certvote/stats.hpp"

namespace certvote {

namespace {

// Stream tags so the shared-query draw and per-member streams never collide.
constexpr std::uint64_t kQueryNoiseTag = 0x71;

Tensor draw_query_noise(const std::vector<std::size_t>& shape, double sigma,
                        std::uint64_t seed, std::uint64_t query_id) {
  rng::Stream stream(rng::derive(rng::derive(seed, kQueryNoiseTag), query_id));
  Tensor eps = Tensor::zeros(shape);
  for (double& v : eps.data) v = sigma * stream.next_gaussian();
  return eps;
}

VoteResult tally(const std::vector<int>& member_labels, std::size_t label_count) {
  VoteResult r;
  r.counts.assign(label_count, 0);
  for (int label : member_labels) r.counts[static_cast<std::size_t>(label)] += 1;

  int best = 0;
  for (std::size_t c = 1; c < label_count; ++c) {
    if (r.counts[c] > r.counts[static_cast<std::size_t>(best)]) {
      best = static_cast<int>(c);
    }
  }
  int second = best == 0 ? 1 : 0;
  for (std::size_t c = 0; c < label_count; ++c) {
    if (static_cast<int>(c) == best) continue;
    if (r.counts[c] > r.counts[static_cast<std::size_t>(second)]) {
      second = static_cast<int>(c);
    }
  }
  r.label = best;
  r.top_label = best;
  r.top_count = r.counts[static_cast<std::size_t>(best)];
  r.runner_up_label = second;
  r.runner_up_count = r.counts[static_cast<std::size_t>(second)];
  return r;
}

}  // namespace

void Ensemble::validate() const {
  if (members.empty()) throw ConfigError("ensemble: needs at least one member");
  for (const Network& net : members) {
    if (net.input_shape != members.front().input_shape) {
      throw ShapeError("ensemble: members disagree on input shape");
    }
    if (net.label_count != label_count) {
      throw ConfigError("ensemble: members disagree on label_count");
    }
  }
}

std::string vote_result_to_json(const VoteResult& r) {
  nlohmann::json j;
  if (r.label == kAbstainLabel) {
    j["label"] = "abstain";
  } else {
    j["label"] = r.label;
  }
  j["counts"] = r.counts;
  j["top2"] = {{"y_A", r.top_label},
               {"n_A", r.top_count},
               {"y_B", r.runner_up_label},
               {"n_B", r.runner_up_count}};
  if (r.rv_pvalue.has_value()) {
    j["rv_pvalue"] = *r.rv_pvalue;
  } else {
    j["rv_pvalue"] = nullptr;
  }
  return j.dump();
}

VoteResult vote(const Ensemble& ens, const Tensor& x) {
  if (ens.members.empty()) throw ConfigError("vote: empty ensemble");
  if (ens.label_count < 2) throw ConfigError("vote: label_count must be >= 2");
  std::vector<int> member_labels(ens.size(), 0);
  // Fan out only for large ensembles; thread startup dwarfs a handful of
  // dense forwards.
  if (ens.size() >= 16 && worker_count() > 1) {
    parallel_for(ens.size(), [&](std::size_t i) {
      member_labels[i] = predict_label(ens.members[i], x);
    });
  } else {
    for (std::size_t i = 0; i < ens.size(); ++i) {
      member_labels[i] = predict_label(ens.members[i], x);
    }
  }
  return tally(member_labels, ens.label_count);
}

VoteResult noisy_query(const Ensemble& ens, const Tensor& x,
                       const QueryPolicy& policy, std::uint64_t query_id) {
  policy.validate();
  VoteResult r;
  if (policy.noise_sigma == 0.0) {
    r = vote(ens, x);
  } else {
    const Tensor eps = draw_query_noise(x.shape, policy.noise_sigma, policy.seed,
                                        query_id);
    Tensor noisy = x;
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += eps[i];
    r = vote(ens, clip01(std::move(noisy)));
  }
  if (policy.rv_alpha.has_value()) {
    const RankVerdict verdict =
        rank_verify(r.top_count, r.runner_up_count, *policy.rv_alpha);
    r.rv_pvalue = verdict.pvalue;
    if (!verdict.pass) r.label = kAbstainLabel;
  }
  return r;
}

Tensor noisy_layer_output(const Network& net, const Tensor& x,
                          std::size_t layer_index, const QueryPolicy& policy,
                          std::uint64_t query_id) {
  policy.validate();
  if (layer_index >= net.layers.size()) {
    throw ConfigError("noisy_layer_output: layer index out of range");
  }
  Tensor input = x;
  if (policy.noise_sigma > 0.0) {
    const Tensor eps =
        draw_query_noise(x.shape, policy.noise_sigma, policy.seed, query_id);
    for (std::size_t i = 0; i < input.size(); ++i) input[i] += eps[i];
  }
  return layer_output(net, input, layer_index);
}

Tensor noisy_probs(const Network& net, const Tensor& x, const QueryPolicy& policy,
                   std::uint64_t query_id) {
  const Tensor z =
      noisy_layer_output(net, x, net.layers.size() - 1, policy, query_id);
  return softmax_t(z, net.temperature);
}

int noisy_member_label(const Network& net, const Tensor& x,
                       const QueryPolicy& policy, std::uint64_t query_id) {
  policy.validate();
  if (policy.noise_sigma == 0.0) return predict_label(net, x);
  const Tensor eps =
      draw_query_noise(x.shape, policy.noise_sigma, policy.seed, query_id);
  Tensor noisy = x;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += eps[i];
  return predict_label(net, clip01(std::move(noisy)));
}

void QueryPolicy::validate() const {
  if (noise_sigma < 0.0) throw ConfigError("query policy: sigma must be >= 0");
  if (rv_alpha.has_value() && !(*rv_alpha > 0.0 && *rv_alpha < 1.0)) {
    throw ConfigError("query policy: rv_alpha must lie in (0, 1)");
  }
}

RankVerdict rank_verify(int top_count, int runner_up_count, double alpha) {
  if (runner_up_count < 0 || top_count < runner_up_count) {
    throw ConfigError("rank_verify: requires n_A >= n_B >= 0");
  }
  const int trials = top_count + runner_up_count;
  if (trials < 1) throw ConfigError("rank_verify: n_A + n_B must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("rank_verify: alpha must lie in (0, 1)");
  }
  RankVerdict v;
  v.pvalue = stats::binom_test_two_sided_half(top_count, trials);
  v.pass = v.pvalue < alpha;
  return v;
}

double voting_success_probability(const std::vector<double>& member_accuracies,
                                  std::size_t label_count, std::size_t trials,
                                  std::uint64_t seed) {
  if (member_accuracies.empty()) {
    throw ConfigError("voting_success_probability: no members");
  }
  if (label_count < 2) {
    throw ConfigError("voting_success_probability: need at least 2 labels");
  }
  if (trials < 1) throw ConfigError("voting_success_probability: trials must be >= 1");
  for (double acc : member_accuracies) {
    if (!(acc >= 0.0 && acc <= 1.0)) {
      throw ConfigError("voting_success_probability: accuracy outside [0, 1]");
    }
  }

  rng::Stream stream(seed);
  std::vector<int> counts(label_count, 0);
  std::size_t successes = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::fill(counts.begin(), counts.end(), 0);
    for (double acc : member_accuracies) {
      std::size_t voted = 0;  // class 0 stands in for the true label
      if (stream.next_unit() >= acc) {
        voted = 1 + static_cast<std::size_t>(stream.next_below(label_count - 1));
      }
      counts[voted] += 1;
    }
    std::size_t winner = 0;
    for (std::size_t c = 1; c < label_count; ++c) {
      if (counts[c] > counts[winner]) winner = c;
    }
    if (winner == 0) ++successes;
  }
  return static_cast<double>(successes) / static_cast<double>(trials);
}

}  // namespace certvote
