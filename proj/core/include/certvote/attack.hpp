#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "certvote/dataset.hpp"
#include "certvote/ensemble.hpp"
#include "certvote/network.hpp"

namespace certvote {

enum class PenaltyKind { loss, margin };

// Which oracle the attacker optimizes against: the clean logits, or logits
// of freshly noise-perturbed inputs (every query re-noised).
struct AttackSurface {
  bool noisy = false;
  double sigma = 0.0;

  static AttackSurface clean_logits() { return {}; }
  static AttackSurface noisy_logits(double sigma) { return {true, sigma}; }
};

struct AttackConfig {
  PenaltyKind penalty_kind = PenaltyKind::margin;
  double c_init = 1e-2;
  int c_search_steps = 6;
  int iterations = 200;     // descent iterations per c round
  double step_size = 0.05;  // optimizer learning rate in tanh space
  double kappa = 0.0;       // margin confidence
  std::uint64_t seed = 0;
  AttackSurface surface;

  void validate() const;
};

struct AdversarialExample {
  std::size_t source_index = 0;
  Tensor original;     // s
  Tensor adversarial;  // a, entries in [0, 1]
  Tensor delta;        // a - s
  int target = 0;
  int crafted_on = -1;  // member index, -1 when not ensemble-scoped
  double perturbation = 0.0;  // ||a - s|| / ||s||
  bool success_on_crafted = false;
};

// ||a - s||_2 / ||s||_2. Throws ConfigError when ||s|| is zero.
double perturbation(const Tensor& a, const Tensor& s);

// max(max_{i != t} z_i - z_t, -kappa).
double margin_penalty(std::span<const double> z, int target, double kappa);

// One row of the c-search trace, for inspection in tests.
struct CraftTraceRow {
  double c = 0.0;
  bool succeeded = false;
  double round_distance = 0.0;    // ||a - s|| of the round's best success (0 if none)
  double recorded_distance = 0.0; // keep-best distance after this round
};

// Penalty-based targeted attack: minimizes c * ||x' - s||^2 + penalty(x', t)
// over x' in [0,1]^d through the change of variables x' = (tanh(w) + 1) / 2,
// with Adam-style per-coordinate step scaling. The outer search walks c
// across the success/failure boundary (growing by 10x from c_init, then
// bisecting between the closest failing and succeeding values) and keeps the
// smallest-perturbation iterate whose crafted-network prediction equals the
// target. On a noisy surface every logit and gradient query is taken at a
// freshly noised input. The returned success flag reflects the clean
// crafted-network prediction of the final iterate.
AdversarialExample craft(const Network& net, const Tensor& s, int target,
                         const AttackConfig& cfg, std::size_t source_index = 0,
                         int crafted_on = -1,
                         std::vector<CraftTraceRow>* trace = nullptr);

// Greedy composite: picks the k smallest-perturbation successful examples
// (all sharing one original and target) and returns clip01(s + sum delta_i).
Tensor superimpose(const std::vector<AdversarialExample>& examples, int k);

// Crafts one example per (sample, target, member) triple; targets equal to
// the sample's label are skipped. Results are ordered by triple index and
// deterministic given cfg.seed regardless of schedule.
std::vector<AdversarialExample> single_network_sweep(
    const Ensemble& ens, const Dataset& samples, const std::vector<int>& targets,
    const AttackConfig& cfg);

// JSON-lines persistence; deltas are stored as (index, value) pairs when at
// most 10% of coordinates are nonzero, dense otherwise.
void write_examples_jsonl(const std::vector<AdversarialExample>& examples,
                          const std::string& path);
std::vector<AdversarialExample> read_examples_jsonl(const std::string& path);
std::string example_to_json(const AdversarialExample& ex);
AdversarialExample example_from_json(const std::string& line);

}  // namespace certvote
