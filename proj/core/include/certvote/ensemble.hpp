#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "certvote/network.hpp"
#include "certvote/tensor.hpp"

namespace certvote {

// Distinguished label for refused predictions.
inline constexpr int kAbstainLabel = -1;

struct Ensemble {
  std::vector<Network> members;
  std::size_t label_count = 10;

  std::size_t size() const { return members.size(); }
  void validate() const;
};

enum class NoiseKind { gaussian };

// Query-time policy: input-noise scale, optional rank-verification
// significance, and the seed of the per-query noise stream.
struct QueryPolicy {
  double noise_sigma = 0.0;
  NoiseKind noise_kind = NoiseKind::gaussian;
  std::optional<double> rv_alpha;
  std::uint64_t seed = 0;

  void validate() const;
};

struct VoteResult {
  int label = kAbstainLabel;
  std::vector<int> counts;  // per class, sums to member count
  int top_label = 0;        // y_A
  int top_count = 0;        // n_A
  int runner_up_label = 0;  // y_B
  int runner_up_count = 0;  // n_B
  std::optional<double> rv_pvalue;
};

// JSON per the wire format: {"label": int|"abstain", "counts": [...],
// "top2": {...}, "rv_pvalue": real|null}.
std::string vote_result_to_json(const VoteResult& r);

// Plurality vote of member predictions; ties break to the lowest class
// index. Member evaluation fans out across workers and reduces to the same
// counts as sequential evaluation.
VoteResult vote(const Ensemble& ens, const Tensor& x);

// Draws one noise sample shared across all members, evaluates
// vote(ens, clip01(x + eps)), and applies rank verification when the policy
// carries an alpha (label becomes abstain when p >= alpha). The draw is a
// pure function of (policy.seed, query_id), so replays are reproducible and
// distinct query ids give fresh noise.
VoteResult noisy_query(const Ensemble& ens, const Tensor& x,
                       const QueryPolicy& policy, std::uint64_t query_id = 0);

// Counter-backed convenience wrapper assigning consecutive query ids.
class QuerySession {
 public:
  explicit QuerySession(QueryPolicy policy) : policy_(std::move(policy)) {}
  VoteResult query(const Ensemble& ens, const Tensor& x) {
    return noisy_query(ens, x, policy_, next_id_++);
  }
  const QueryPolicy& policy() const { return policy_; }

 private:
  QueryPolicy policy_;
  std::uint64_t next_id_ = 0;
};

// Genuine forward pass of the noise-perturbed input through layers
// 1..layer_index+1. The perturbed input is NOT clipped: the mechanism
// reports the network's true response to x + eps at any layer, and an
// identity layer must reproduce the drawn noise exactly.
Tensor noisy_layer_output(const Network& net, const Tensor& x,
                          std::size_t layer_index, const QueryPolicy& policy,
                          std::uint64_t query_id = 0);

// Post-softmax output of the same noisy pass (same query_id => same draw as
// noisy_layer_output on the final layer).
Tensor noisy_probs(const Network& net, const Tensor& x, const QueryPolicy& policy,
                   std::uint64_t query_id = 0);

// Prediction of one member under the policy noise (single-network NL path).
int noisy_member_label(const Network& net, const Tensor& x,
                       const QueryPolicy& policy, std::uint64_t query_id = 0);

struct RankVerdict {
  double pvalue = 1.0;
  bool pass = false;  // pvalue < alpha
};

// Exact two-sided binomial test of n_A successes in n_A + n_B trials at
// success probability 1/2.
RankVerdict rank_verify(int top_count, int runner_up_count, double alpha);

// Monte Carlo estimate of P(plurality vote correct) for independent members
// with the given accuracies; a wrong member picks uniformly among the other
// label_count - 1 classes. Plurality with lowest-index tie-break.
double voting_success_probability(const std::vector<double>& member_accuracies,
                                  std::size_t label_count, std::size_t trials,
                                  std::uint64_t seed);

}  // namespace certvote
