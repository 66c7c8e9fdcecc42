#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "certvote/attack.hpp"
#include "certvote/certify.hpp"
#include "certvote/dataset.hpp"
#include "certvote/ensemble.hpp"
#include "certvote/train.hpp"

namespace certvote {

// Full experiment description. Loadable from JSON or key=value text; every
// field has a desk-scale default.
struct ExperimentConfig {
  // dataset
  std::string dataset = "blobs";  // "blobs" | "idx"
  std::string idx_images;
  std::string idx_labels;
  std::size_t blob_classes = 10;
  std::size_t blob_per_class = 100;
  std::size_t blob_dim = 16;
  double blob_spread = 0.12;

  // ensemble and architecture
  std::size_t members = 5;
  double temperature_base = 10.0;  // T_l = base * l, l = 1..m
  bool partitioned = true;         // disjoint per-member training subsets
  std::size_t part_size = 0;       // 0 = auto
  std::size_t validation_size = 0; // 0 = auto
  std::string arch = "auto";       // "dense" | "conv" | "auto"
  std::size_t hidden_width = 32;   // dense hidden width
  std::size_t conv_channels = 8;   // reduced conv width
  TrainConfig train;

  // query policies
  double noise_sigma = 0.5;
  double rv_alpha = 0.05;

  // attacks
  AttackConfig attack;
  std::size_t sample_count = 5;  // attack samples drawn from validation
  std::size_t bin_count = 40;

  // certification
  int certify_n = 500;
  double certify_alpha = 0.05;
  double certify_sigma = 0.0;  // 0 = reuse noise_sigma
  std::size_t certify_samples = 5;
  int radius_check_trials = 200;

  std::string out_dir = "out";
  std::uint64_t root_seed = 0;

  void validate() const;
  void set_key(const std::string& key, const std::string& value);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_json() const;
};

struct PolicyVariant {
  std::string name;
  QueryPolicy policy;
};

// The three evaluation paths of the experiments: plain voting, noisy logit,
// and noisy logit plus rank verification.
std::vector<PolicyVariant> make_policy_variants(const ExperimentConfig& cfg);

std::vector<double> member_temperatures(std::size_t members, double base);

// Architecture builder at reduced desk-scale width; "auto" picks dense for
// flat inputs and the conv stack for [C, H, W] inputs.
Network build_network(const ExperimentConfig& cfg,
                      const std::vector<std::size_t>& input_shape,
                      std::size_t label_count, double temperature,
                      std::uint64_t init_seed);

struct TrainedEnsemble {
  Ensemble ensemble;
  std::vector<double> validation_accuracy;
  std::vector<Dataset> training_parts;  // one per member (shared mode: copies)
  Dataset validation;
};

// Trains the m members with temperatures T_l = base * l on a partitioned or
// shared training set; members may train concurrently.
TrainedEnsemble train_ensemble(const ExperimentConfig& cfg, const Dataset& full);

struct OutcomeRow {
  std::string model;
  double clean_accuracy = 0.0;           // correct / total over clean samples
  double clean_answered_accuracy = 0.0;  // over non-abstained clean samples
  double attack_accuracy = 0.0;          // correct / total (abstain = error)
  double answered_only_accuracy = 0.0;   // correct / answered; 1 when none answered
  double correct_pct = 0.0;
  double target_pct = 0.0;
  double other_pct = 0.0;
  double abstain_pct = 0.0;
  double avg_pert_correct = 0.0;
  double avg_pert_target = 0.0;
  double avg_pert_other = 0.0;
  double avg_pert_abstain = 0.0;
  std::size_t answered = 0;
  std::size_t total = 0;
};

struct OutcomeTable {
  std::vector<OutcomeRow> rows;
};

// Classifies every adversarial input through each variant's query path and
// tallies Correct / Target / Other / Abstain with matched mean perturbation
// ratios. Clean accuracy runs the original samples through the same path.
OutcomeTable evaluate_outcomes(const Ensemble& ens, const Dataset& samples,
                               const std::vector<AdversarialExample>& examples,
                               const std::vector<PolicyVariant>& variants);

// Paper-style "single network" row: mean over members of their own accuracy
// on the clean samples and on every adversarial example.
struct SingleNetworkSummary {
  double clean_accuracy = 0.0;
  double attack_accuracy = 0.0;
};
SingleNetworkSummary mean_member_outcomes(const Ensemble& ens, const Dataset& samples,
                                          const std::vector<AdversarialExample>& examples,
                                          const QueryPolicy& policy);

struct BinSeries {
  std::vector<double> midpoints;
  std::vector<double> flip_to_target_mean;  // avg members flipping to the target
  std::vector<double> flip_to_other_mean;   // avg members flipping elsewhere
  std::vector<double> ens_to_target_freq;   // ensemble flips to target / N
  std::vector<double> ens_to_other_freq;    // ensemble flips elsewhere / N
  std::vector<double> ens_accuracy;         // per-bin ensemble accuracy
  std::vector<std::size_t> example_count;
  std::vector<std::size_t> ens_to_target_count;
  std::vector<std::size_t> ens_to_other_count;
  std::vector<std::size_t> member_flip_count;  // total member flips per bin
  std::size_t total_examples = 0;
};

// Per-bin transfer statistics over equal-width perturbation bins spanning
// [0, max observed perturbation].
BinSeries transfer_series(const Ensemble& ens, const Dataset& samples,
                          const std::vector<AdversarialExample>& examples,
                          std::size_t bin_count);

// Crafts one example per member on (s, t) and reports each member's
// classification of its own example under the given policy.
std::vector<int> network_grid(const Ensemble& ens, const Tensor& s, int target,
                              const AttackConfig& attack_cfg,
                              const QueryPolicy& policy, std::uint64_t seed);

// End-to-end pipeline: train -> attack sweep -> SI2/SI3 -> outcome tables ->
// transfer series -> grids -> certification -> manifest. Returns the output
// directory. A stage failure is rethrown with the stage name; outputs
// written before the failure persist.
std::string run_pipeline(const ExperimentConfig& cfg);

// Formats a double for CSV output (deterministic across runs).
std::string csv_number(double v);

}  // namespace certvote
