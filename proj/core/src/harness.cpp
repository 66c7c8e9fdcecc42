#include "certvote/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "certvote/errors.hpp"
#include "certvote/model_io.hpp"
#include "certvote/parallel.hpp"
#include "certvote/rng.hpp"
#include "certvote/version.hpp"

namespace certvote {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Stream tags for the pipeline's derived seeds.
constexpr std::uint64_t kDatasetTag = 0x01;
constexpr std::uint64_t kPartitionTag = 0x02;
constexpr std::uint64_t kMemberInitTag = 0x10;
constexpr std::uint64_t kMemberTrainTag = 0x11;
constexpr std::uint64_t kPolicyTag = 0x20;
constexpr std::uint64_t kSweepTag = 0x30;
constexpr std::uint64_t kGridCleanTag = 0x31;
constexpr std::uint64_t kGridNoisyTag = 0x32;
constexpr std::uint64_t kCertifyTag = 0x40;
constexpr std::uint64_t kRadiusCheckTag = 0x41;
constexpr std::uint64_t kBreakQueryTag = 0x42;

// Query-id block separating clean-sample queries from attack queries.
constexpr std::uint64_t kAttackQueryBase = 1ull << 32;

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: expected boolean, got '" + v + "'");
}

double parse_double(const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("config: trailing characters in '" + v + "'");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: expected number, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size()) throw ConfigError("config: trailing characters in '" + v + "'");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: expected unsigned integer, got '" + v + "'");
  }
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

template <typename Fn>
void run_stage(const std::string& name, Fn&& fn) {
  const auto prefix = [&](const char* what) {
    return "pipeline stage '" + name + "': " + what;
  };
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix(e.what()));
  } catch (const ShapeError& e) {
    throw ShapeError(prefix(e.what()));
  } catch (const InsufficientExamplesError& e) {
    throw InsufficientExamplesError(prefix(e.what()));
  } catch (const DataError& e) {
    throw DataError(prefix(e.what()));
  } catch (const NumericError& e) {
    throw NumericError(prefix(e.what()));
  } catch (const std::exception& e) {
    throw Error(prefix(e.what()));
  }
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void ExperimentConfig::validate() const {
  if (dataset != "blobs" && dataset != "idx") {
    throw ConfigError("config: dataset must be 'blobs' or 'idx'");
  }
  if (dataset == "idx" && (idx_images.empty() || idx_labels.empty())) {
    throw ConfigError("config: idx dataset needs idx_images and idx_labels paths");
  }
  if (members < 1) throw ConfigError("config: members must be >= 1");
  if (bin_count < 1) throw ConfigError("config: bin_count must be >= 1");
  if (!(temperature_base > 0.0)) {
    throw ConfigError("config: temperature_base must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("config: noise_sigma must be >= 0");
  if (!(rv_alpha > 0.0 && rv_alpha < 1.0)) {
    throw ConfigError("config: rv_alpha must lie in (0, 1)");
  }
  if (sample_count < 1) throw ConfigError("config: sample_count must be >= 1");
  if (certify_n < 1) throw ConfigError("config: certify_n must be >= 1");
  if (!(certify_alpha > 0.0 && certify_alpha < 1.0)) {
    throw ConfigError("config: certify_alpha must lie in (0, 1)");
  }
  if (certify_sigma < 0.0) throw ConfigError("config: certify_sigma must be >= 0");
  if (radius_check_trials < 1) {
    throw ConfigError("config: radius_check_trials must be >= 1");
  }
  if (arch != "auto" && arch != "dense" && arch != "conv") {
    throw ConfigError("config: arch must be auto, dense, or conv");
  }
  if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
  train.validate();
  attack.validate();
}

void ExperimentConfig::set_key(const std::string& key, const std::string& value) {
  if (key == "dataset") dataset = value;
  else if (key == "idx_images") idx_images = value;
  else if (key == "idx_labels") idx_labels = value;
  else if (key == "classes" || key == "blob_classes") blob_classes = parse_u64(value);
  else if (key == "per_class" || key == "blob_per_class") blob_per_class = parse_u64(value);
  else if (key == "dim" || key == "blob_dim") blob_dim = parse_u64(value);
  else if (key == "spread" || key == "blob_spread") blob_spread = parse_double(value);
  else if (key == "members") members = parse_u64(value);
  else if (key == "temperature_base") temperature_base = parse_double(value);
  else if (key == "partitioned") partitioned = parse_bool(value);
  else if (key == "part_size") part_size = parse_u64(value);
  else if (key == "validation_size") validation_size = parse_u64(value);
  else if (key == "arch") arch = value;
  else if (key == "hidden_width") hidden_width = parse_u64(value);
  else if (key == "conv_channels") conv_channels = parse_u64(value);
  else if (key == "learning_rate" || key == "lr") train.learning_rate = parse_double(value);
  else if (key == "decay") train.decay = parse_double(value);
  else if (key == "momentum") train.momentum = parse_double(value);
  else if (key == "dropout" || key == "dropout_keep") train.dropout_keep = parse_double(value);
  else if (key == "batch_size") train.batch_size = parse_u64(value);
  else if (key == "epochs") train.epochs = parse_u64(value);
  else if (key == "sigma" || key == "noise_sigma") noise_sigma = parse_double(value);
  else if (key == "rv_alpha") rv_alpha = parse_double(value);
  else if (key == "penalty") {
    if (value == "loss") attack.penalty_kind = PenaltyKind::loss;
    else if (value == "margin") attack.penalty_kind = PenaltyKind::margin;
    else throw ConfigError("config: penalty must be 'loss' or 'margin'");
  }
  else if (key == "c_init") attack.c_init = parse_double(value);
  else if (key == "c_search_steps") attack.c_search_steps = static_cast<int>(parse_u64(value));
  else if (key == "attack_iterations" || key == "iterations") {
    attack.iterations = static_cast<int>(parse_u64(value));
  }
  else if (key == "step_size") attack.step_size = parse_double(value);
  else if (key == "kappa") attack.kappa = parse_double(value);
  else if (key == "attack_surface") {
    // sigma 0 here means "resolve against noise_sigma when the attack runs"
    if (value == "clean") attack.surface = AttackSurface::clean_logits();
    else if (value == "noisy") attack.surface = AttackSurface::noisy_logits(0.0);
    else throw ConfigError("config: attack_surface must be 'clean' or 'noisy'");
  }
  else if (key == "samples" || key == "sample_count") sample_count = parse_u64(value);
  else if (key == "bins" || key == "bin_count") bin_count = parse_u64(value);
  else if (key == "certify_n") certify_n = static_cast<int>(parse_u64(value));
  else if (key == "certify_alpha") certify_alpha = parse_double(value);
  else if (key == "certify_sigma") certify_sigma = parse_double(value);
  else if (key == "certify_samples") certify_samples = parse_u64(value);
  else if (key == "radius_check_trials") {
    radius_check_trials = static_cast<int>(parse_u64(value));
  }
  else if (key == "out" || key == "out_dir") out_dir = value;
  else if (key == "seed" || key == "root_seed") root_seed = parse_u64(value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  ExperimentConfig cfg;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    for (const auto& [key, value] : j.items()) {
      if (value.is_string()) {
        cfg.set_key(key, value.get<std::string>());
      } else {
        cfg.set_key(key, value.dump());
      }
    }
    return cfg;
  }

  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key=value, got '" + t + "'");
    }
    cfg.set_key(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["dataset"] = dataset;
  j["idx_images"] = idx_images;
  j["idx_labels"] = idx_labels;
  j["blob_classes"] = blob_classes;
  j["blob_per_class"] = blob_per_class;
  j["blob_dim"] = blob_dim;
  j["blob_spread"] = blob_spread;
  j["members"] = members;
  j["temperature_base"] = temperature_base;
  j["partitioned"] = partitioned;
  j["part_size"] = part_size;
  j["validation_size"] = validation_size;
  j["arch"] = arch;
  j["hidden_width"] = hidden_width;
  j["conv_channels"] = conv_channels;
  j["learning_rate"] = train.learning_rate;
  j["decay"] = train.decay;
  j["momentum"] = train.momentum;
  j["dropout_keep"] = train.dropout_keep;
  j["batch_size"] = train.batch_size;
  j["epochs"] = train.epochs;
  j["noise_sigma"] = noise_sigma;
  j["rv_alpha"] = rv_alpha;
  j["penalty"] = attack.penalty_kind == PenaltyKind::loss ? "loss" : "margin";
  j["c_init"] = attack.c_init;
  j["c_search_steps"] = attack.c_search_steps;
  j["attack_iterations"] = attack.iterations;
  j["step_size"] = attack.step_size;
  j["kappa"] = attack.kappa;
  j["attack_surface"] = attack.surface.noisy ? "noisy" : "clean";
  j["sample_count"] = sample_count;
  j["bin_count"] = bin_count;
  j["certify_n"] = certify_n;
  j["certify_alpha"] = certify_alpha;
  j["certify_sigma"] = certify_sigma;
  j["certify_samples"] = certify_samples;
  j["radius_check_trials"] = radius_check_trials;
  j["out_dir"] = out_dir;
  j["root_seed"] = root_seed;
  return j.dump();
}

std::vector<PolicyVariant> make_policy_variants(const ExperimentConfig& cfg) {
  std::vector<PolicyVariant> variants(3);
  variants[0].name = "ensemble";
  variants[0].policy.noise_sigma = 0.0;
  variants[0].policy.seed = rng::derive(cfg.root_seed, kPolicyTag, 0);

  variants[1].name = "ensemble+NL";
  variants[1].policy.noise_sigma = cfg.noise_sigma;
  variants[1].policy.seed = rng::derive(cfg.root_seed, kPolicyTag, 1);

  variants[2].name = "ensemble+NL+RV";
  variants[2].policy.noise_sigma = cfg.noise_sigma;
  variants[2].policy.rv_alpha = cfg.rv_alpha;
  variants[2].policy.seed = rng::derive(cfg.root_seed, kPolicyTag, 2);
  return variants;
}

std::vector<double> member_temperatures(std::size_t members, double base) {
  std::vector<double> out(members);
  for (std::size_t l = 0; l < members; ++l) {
    out[l] = base * static_cast<double>(l + 1);
  }
  return out;
}

Network build_network(const ExperimentConfig& cfg,
                      const std::vector<std::size_t>& input_shape,
                      std::size_t label_count, double temperature,
                      std::uint64_t init_seed) {
  std::string arch = cfg.arch;
  if (arch == "auto") arch = input_shape.size() == 1 ? "dense" : "conv";

  Network net;
  net.input_shape = input_shape;
  net.temperature = temperature;
  net.label_count = label_count;

  std::vector<std::size_t> shape = input_shape;
  auto push = [&](Layer l) {
    shape = l.output_shape(shape);
    net.layers.push_back(std::move(l));
  };

  if (arch == "dense") {
    if (input_shape.size() != 1) push(Layer::flatten());
    push(Layer::dense(shape[0], cfg.hidden_width));
    push(Layer::relu());
    push(Layer::dropout(cfg.train.dropout_keep));
    push(Layer::dense(cfg.hidden_width, cfg.hidden_width));
    push(Layer::relu());
    push(Layer::dense(cfg.hidden_width, label_count));
  } else {
    if (input_shape.size() == 2) {
      // single-channel image stored as [H, W]
      net.input_shape = {1, input_shape[0], input_shape[1]};
      shape = net.input_shape;
    } else if (input_shape.size() != 3) {
      throw ConfigError("build_network: conv arch needs an image input");
    }
    const std::size_t cc = cfg.conv_channels;
    push(Layer::conv2d(3, 3, shape[0], cc));
    push(Layer::relu());
    push(Layer::conv2d(3, 3, cc, cc));
    push(Layer::relu());
    push(Layer::maxpool2d());
    // The second conv block needs room for two 3x3 kernels plus a pool.
    if (shape[1] >= 6 && shape[2] >= 6) {
      push(Layer::conv2d(3, 3, cc, cc));
      push(Layer::relu());
      push(Layer::conv2d(3, 3, cc, cc));
      push(Layer::relu());
      push(Layer::maxpool2d());
    }
    push(Layer::flatten());
    const std::size_t fc = cfg.hidden_width * 2;
    push(Layer::dense(shape[0], fc));
    push(Layer::relu());
    push(Layer::dropout(cfg.train.dropout_keep));
    push(Layer::dense(fc, fc));
    push(Layer::relu());
    push(Layer::dense(fc, label_count));
  }

  init_weights(net, init_seed);
  net.validate();
  return net;
}

TrainedEnsemble train_ensemble(const ExperimentConfig& cfg, const Dataset& full) {
  if (full.size() == 0) throw DataError("train_ensemble: empty dataset");

  std::size_t label_count = 2;
  for (int label : full.labels) {
    label_count = std::max(label_count, static_cast<std::size_t>(label) + 1);
  }

  const std::size_t n = full.size();
  const std::size_t validation =
      cfg.validation_size > 0 ? cfg.validation_size : std::max<std::size_t>(1, n / 4);
  if (validation >= n) throw DataError("train_ensemble: validation set swallows the data");

  TrainedEnsemble out;
  if (cfg.partitioned) {
    PartitionPlan plan;
    plan.part_count = cfg.members;
    plan.part_size =
        cfg.part_size > 0 ? cfg.part_size : (n - validation) / cfg.members;
    plan.validation_size = validation;
    plan.seed = rng::derive(cfg.root_seed, kPartitionTag);
    if (plan.part_size == 0) {
      throw DataError("train_ensemble: dataset too small for the partition plan");
    }
    Partitioned parts = partition(full, plan);
    out.training_parts = std::move(parts.parts);
    out.validation = std::move(parts.validation);
  } else {
    PartitionPlan plan;
    plan.part_count = 1;
    plan.part_size = n - validation;
    plan.validation_size = validation;
    plan.seed = rng::derive(cfg.root_seed, kPartitionTag);
    Partitioned parts = partition(full, plan);
    out.training_parts.assign(cfg.members, parts.parts.front());
    out.validation = std::move(parts.validation);
  }

  const std::vector<double> temps = member_temperatures(cfg.members, cfg.temperature_base);
  out.ensemble.label_count = label_count;
  out.ensemble.members.resize(cfg.members);
  out.validation_accuracy.assign(cfg.members, 0.0);

  const std::vector<std::size_t>& input_shape = full.inputs.front().shape;
  parallel_for(cfg.members, [&](std::size_t l) {
    Network net = build_network(cfg, input_shape, label_count, temps[l],
                                rng::derive(cfg.root_seed, kMemberInitTag, l));
    TrainConfig tc = cfg.train;
    tc.seed = rng::derive(cfg.root_seed, kMemberTrainTag, l);
    Dataset part = out.training_parts[l];
    if (net.input_shape != input_shape) {
      for (Tensor& x : part.inputs) x = reshape(std::move(x), net.input_shape);
    }
    out.ensemble.members[l] = train(std::move(net), part, tc);
  });

  // Reshape validation inputs once if the architecture re-ranked the input.
  const auto& net_shape = out.ensemble.members.front().input_shape;
  if (net_shape != input_shape) {
    for (Tensor& x : out.validation.inputs) x = reshape(std::move(x), net_shape);
    for (Dataset& part : out.training_parts) {
      for (Tensor& x : part.inputs) x = reshape(std::move(x), net_shape);
    }
  }

  for (std::size_t l = 0; l < cfg.members; ++l) {
    out.validation_accuracy[l] = accuracy(out.ensemble.members[l], out.validation);
  }
  out.ensemble.validate();
  return out;
}

OutcomeTable evaluate_outcomes(const Ensemble& ens, const Dataset& samples,
                               const std::vector<AdversarialExample>& examples,
                               const std::vector<PolicyVariant>& variants) {
  OutcomeTable table;
  for (const PolicyVariant& variant : variants) {
    OutcomeRow row;
    row.model = variant.name;
    row.total = examples.size();

    // Clean pass through the same query path.
    std::size_t clean_hits = 0;
    std::size_t clean_answered = 0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const VoteResult r = noisy_query(ens, samples.inputs[k], variant.policy, k);
      if (r.label == kAbstainLabel) continue;
      ++clean_answered;
      if (r.label == samples.labels[k]) ++clean_hits;
    }
    row.clean_accuracy = samples.size() == 0
                             ? 0.0
                             : static_cast<double>(clean_hits) /
                                   static_cast<double>(samples.size());
    row.clean_answered_accuracy =
        clean_answered == 0 ? 1.0
                            : static_cast<double>(clean_hits) /
                                  static_cast<double>(clean_answered);

    std::size_t correct = 0, target = 0, other = 0, abstain = 0;
    double pert_correct = 0.0, pert_target = 0.0, pert_other = 0.0, pert_abstain = 0.0;
    for (std::size_t ei = 0; ei < examples.size(); ++ei) {
      const AdversarialExample& ex = examples[ei];
      if (ex.source_index >= samples.size()) {
        throw DataError("evaluate_outcomes: example source index out of range");
      }
      const VoteResult r =
          noisy_query(ens, ex.adversarial, variant.policy, kAttackQueryBase + ei);
      const int truth = samples.labels[ex.source_index];
      if (r.label == kAbstainLabel) {
        ++abstain;
        pert_abstain += ex.perturbation;
      } else if (r.label == truth) {
        ++correct;
        pert_correct += ex.perturbation;
      } else if (r.label == ex.target) {
        ++target;
        pert_target += ex.perturbation;
      } else {
        ++other;
        pert_other += ex.perturbation;
      }
    }

    const double total = static_cast<double>(examples.size());
    if (examples.size() > 0) {
      row.correct_pct = 100.0 * correct / total;
      row.target_pct = 100.0 * target / total;
      row.other_pct = 100.0 * other / total;
      row.abstain_pct = 100.0 * abstain / total;
      row.attack_accuracy = correct / total;
    }
    row.answered = examples.size() - abstain;
    row.answered_only_accuracy =
        row.answered == 0 ? 1.0
                          : static_cast<double>(correct) /
                                static_cast<double>(row.answered);
    row.avg_pert_correct = correct ? pert_correct / correct : 0.0;
    row.avg_pert_target = target ? pert_target / target : 0.0;
    row.avg_pert_other = other ? pert_other / other : 0.0;
    row.avg_pert_abstain = abstain ? pert_abstain / abstain : 0.0;
    table.rows.push_back(std::move(row));
  }
  return table;
}

SingleNetworkSummary mean_member_outcomes(const Ensemble& ens, const Dataset& samples,
                                          const std::vector<AdversarialExample>& examples,
                                          const QueryPolicy& policy) {
  if (ens.members.empty()) throw ConfigError("mean_member_outcomes: empty ensemble");
  SingleNetworkSummary summary;
  const std::uint64_t stride = kAttackQueryBase;
  for (std::size_t l = 0; l < ens.size(); ++l) {
    std::size_t clean_hits = 0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const int label = noisy_member_label(ens.members[l], samples.inputs[k], policy,
                                           2 * stride * l + k);
      if (label == samples.labels[k]) ++clean_hits;
    }
    std::size_t attack_hits = 0;
    for (std::size_t ei = 0; ei < examples.size(); ++ei) {
      const int label = noisy_member_label(ens.members[l], examples[ei].adversarial,
                                           policy, 2 * stride * l + stride + ei);
      if (label == samples.labels[examples[ei].source_index]) ++attack_hits;
    }
    if (samples.size() > 0) {
      summary.clean_accuracy +=
          static_cast<double>(clean_hits) / static_cast<double>(samples.size());
    }
    if (!examples.empty()) {
      summary.attack_accuracy +=
          static_cast<double>(attack_hits) / static_cast<double>(examples.size());
    }
  }
  summary.clean_accuracy /= static_cast<double>(ens.size());
  summary.attack_accuracy /= static_cast<double>(ens.size());
  return summary;
}

BinSeries transfer_series(const Ensemble& ens, const Dataset& samples,
                          const std::vector<AdversarialExample>& examples,
                          std::size_t bin_count) {
  if (examples.empty()) throw DataError("transfer_series: empty example set");
  if (bin_count < 1) throw ConfigError("transfer_series: bin_count must be >= 1");

  // Clean-path reference labels per source sample, computed once.
  std::vector<std::vector<int>> member_clean(samples.size());
  std::vector<int> ens_clean(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    member_clean[k].resize(ens.size());
    for (std::size_t l = 0; l < ens.size(); ++l) {
      member_clean[k][l] = predict_label(ens.members[l], samples.inputs[k]);
    }
    ens_clean[k] = vote(ens, samples.inputs[k]).label;
  }

  double max_p = 0.0;
  for (const AdversarialExample& ex : examples) max_p = std::max(max_p, ex.perturbation);

  BinSeries series;
  series.total_examples = examples.size();
  series.midpoints.assign(bin_count, 0.0);
  series.flip_to_target_mean.assign(bin_count, 0.0);
  series.flip_to_other_mean.assign(bin_count, 0.0);
  series.ens_to_target_freq.assign(bin_count, 0.0);
  series.ens_to_other_freq.assign(bin_count, 0.0);
  series.ens_accuracy.assign(bin_count, 0.0);
  series.example_count.assign(bin_count, 0);
  series.ens_to_target_count.assign(bin_count, 0);
  series.ens_to_other_count.assign(bin_count, 0);
  series.member_flip_count.assign(bin_count, 0);

  const double width = max_p > 0.0 ? max_p / static_cast<double>(bin_count) : 0.0;
  for (std::size_t b = 0; b < bin_count; ++b) {
    series.midpoints[b] = width * (static_cast<double>(b) + 0.5);
  }

  std::vector<std::size_t> flips_to_target(bin_count, 0);
  std::vector<std::size_t> flips_to_other(bin_count, 0);
  std::vector<std::size_t> ens_correct(bin_count, 0);

  for (const AdversarialExample& ex : examples) {
    if (ex.source_index >= samples.size()) {
      throw DataError("transfer_series: example source index out of range");
    }
    std::size_t bin = 0;
    if (max_p > 0.0) {
      bin = static_cast<std::size_t>(ex.perturbation / max_p *
                                     static_cast<double>(bin_count));
      bin = std::min(bin, bin_count - 1);
    }
    series.example_count[bin] += 1;

    for (std::size_t l = 0; l < ens.size(); ++l) {
      const int la = predict_label(ens.members[l], ex.adversarial);
      if (la == member_clean[ex.source_index][l]) continue;
      series.member_flip_count[bin] += 1;
      if (la == ex.target) {
        flips_to_target[bin] += 1;
      } else {
        flips_to_other[bin] += 1;
      }
    }

    const int ea = vote(ens, ex.adversarial).label;
    if (ea != ens_clean[ex.source_index]) {
      if (ea == ex.target) {
        series.ens_to_target_count[bin] += 1;
      } else {
        series.ens_to_other_count[bin] += 1;
      }
    }
    if (ea == samples.labels[ex.source_index]) ens_correct[bin] += 1;
  }

  const double n_total = static_cast<double>(examples.size());
  for (std::size_t b = 0; b < bin_count; ++b) {
    const double count = static_cast<double>(series.example_count[b]);
    if (count > 0.0) {
      series.flip_to_target_mean[b] = static_cast<double>(flips_to_target[b]) / count;
      series.flip_to_other_mean[b] = static_cast<double>(flips_to_other[b]) / count;
      series.ens_accuracy[b] = static_cast<double>(ens_correct[b]) / count;
    }
    series.ens_to_target_freq[b] =
        static_cast<double>(series.ens_to_target_count[b]) / n_total;
    series.ens_to_other_freq[b] =
        static_cast<double>(series.ens_to_other_count[b]) / n_total;
  }
  return series;
}

std::vector<int> network_grid(const Ensemble& ens, const Tensor& s, int target,
                              const AttackConfig& attack_cfg,
                              const QueryPolicy& policy, std::uint64_t seed) {
  ens.validate();
  std::vector<int> grid(ens.size(), 0);
  parallel_for(ens.size(), [&](std::size_t l) {
    AttackConfig local = attack_cfg;
    local.seed = rng::derive(seed, l);
    const AdversarialExample ex =
        craft(ens.members[l], s, target, local, 0, static_cast<int>(l));
    grid[l] = policy.noise_sigma > 0.0
                  ? noisy_member_label(ens.members[l], ex.adversarial, policy, l)
                  : predict_label(ens.members[l], ex.adversarial);
  });
  return grid;
}

namespace {

void write_outcomes_csv(const fs::path& path, const OutcomeTable& table,
                        const std::vector<std::pair<std::string, SingleNetworkSummary>>&
                            single_rows) {
  std::ofstream out = open_out(path);
  out << "model,clean_accuracy,clean_answered_accuracy,attack_accuracy,"
         "answered_only_accuracy,correct_pct,target_pct,other_pct,abstain_pct,"
         "avg_pert_correct,avg_pert_target,avg_pert_other,avg_pert_abstain,"
         "answered,total\n";
  for (const auto& [name, s] : single_rows) {
    out << name << "," << csv_number(s.clean_accuracy) << ",,"
        << csv_number(s.attack_accuracy) << ",,,,,,,,,,,\n";
  }
  for (const OutcomeRow& r : table.rows) {
    out << r.model << "," << csv_number(r.clean_accuracy) << ","
        << csv_number(r.clean_answered_accuracy) << ","
        << csv_number(r.attack_accuracy) << ","
        << csv_number(r.answered_only_accuracy) << ","
        << csv_number(r.correct_pct) << "," << csv_number(r.target_pct) << ","
        << csv_number(r.other_pct) << "," << csv_number(r.abstain_pct) << ","
        << csv_number(r.avg_pert_correct) << "," << csv_number(r.avg_pert_target)
        << "," << csv_number(r.avg_pert_other) << ","
        << csv_number(r.avg_pert_abstain) << "," << r.answered << "," << r.total
        << "\n";
  }
}

void write_transfer_csv(const fs::path& path, const BinSeries& series) {
  std::ofstream out = open_out(path);
  out << "bin,midpoint,examples,flip_to_target_mean,flip_to_other_mean,"
         "ens_to_target_freq,ens_to_other_freq,ens_accuracy,"
         "ens_to_target_count,ens_to_other_count,member_flips\n";
  for (std::size_t b = 0; b < series.midpoints.size(); ++b) {
    out << b << "," << csv_number(series.midpoints[b]) << ","
        << series.example_count[b] << ","
        << csv_number(series.flip_to_target_mean[b]) << ","
        << csv_number(series.flip_to_other_mean[b]) << ","
        << csv_number(series.ens_to_target_freq[b]) << ","
        << csv_number(series.ens_to_other_freq[b]) << ","
        << csv_number(series.ens_accuracy[b]) << ","
        << series.ens_to_target_count[b] << "," << series.ens_to_other_count[b]
        << "," << series.member_flip_count[b] << "\n";
  }
}

void write_grid_csv(const fs::path& path, const std::vector<int>& grid) {
  std::ofstream out = open_out(path);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out << grid[i];
    out << (((i + 1) % 5 == 0 || i + 1 == grid.size()) ? "\n" : ",");
  }
}

Dataset select_samples(const Ensemble& ens, const Dataset& validation,
                       std::size_t count) {
  if (validation.size() < count) {
    throw DataError("pipeline: validation set smaller than the requested sample count");
  }
  Dataset out;
  out.name = "attack-samples";
  // Prefer inputs the plain ensemble classifies correctly, in order.
  for (std::size_t k = 0; k < validation.size() && out.size() < count; ++k) {
    if (vote(ens, validation.inputs[k]).label == validation.labels[k]) {
      out.inputs.push_back(validation.inputs[k]);
      out.labels.push_back(validation.labels[k]);
    }
  }
  for (std::size_t k = 0; k < validation.size() && out.size() < count; ++k) {
    if (vote(ens, validation.inputs[k]).label != validation.labels[k]) {
      out.inputs.push_back(validation.inputs[k]);
      out.labels.push_back(validation.labels[k]);
    }
  }
  return out;
}

std::vector<AdversarialExample> build_superimpositions(
    const Dataset& samples, const std::vector<AdversarialExample>& sweep, int k) {
  std::map<std::pair<std::size_t, int>, std::vector<AdversarialExample>> groups;
  for (const AdversarialExample& ex : sweep) {
    groups[{ex.source_index, ex.target}].push_back(ex);
  }
  std::vector<AdversarialExample> out;
  for (const auto& [key, group] : groups) {
    std::size_t successes = 0;
    for (const auto& ex : group) successes += ex.success_on_crafted ? 1 : 0;
    if (successes < static_cast<std::size_t>(k)) continue;
    const Tensor& s = samples.inputs[key.first];
    AdversarialExample si;
    si.source_index = key.first;
    si.target = key.second;
    si.crafted_on = -1;
    si.original = s;
    si.adversarial = superimpose(group, k);
    si.delta = subtract(si.adversarial, s);
    si.perturbation = perturbation(si.adversarial, s);
    si.success_on_crafted = false;  // not scoped to one member
    out.push_back(std::move(si));
  }
  return out;
}

}  // namespace

std::string run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);
  fs::create_directories(out_dir / "models");

  Dataset full;
  run_stage("data", [&] {
    if (cfg.dataset == "blobs") {
      full = synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim,
                         cfg.blob_spread, rng::derive(cfg.root_seed, kDatasetTag));
    } else {
      full = load_idx(cfg.idx_images, cfg.idx_labels);
    }
  });

  TrainedEnsemble trained;
  run_stage("train", [&] {
    trained = train_ensemble(cfg, full);
    const std::vector<double> temps =
        member_temperatures(cfg.members, cfg.temperature_base);
    std::ofstream acc = open_out(out_dir / "validation_accuracy.csv");
    acc << "member,temperature,validation_accuracy\n";
    for (std::size_t l = 0; l < cfg.members; ++l) {
      char name[64];
      std::snprintf(name, sizeof(name), "member_%03zu.json", l);
      save_network(trained.ensemble.members[l], (out_dir / "models" / name).string());
      acc << l << "," << csv_number(temps[l]) << ","
          << csv_number(trained.validation_accuracy[l]) << "\n";
    }
  });
  const Ensemble& ens = trained.ensemble;

  Dataset samples;
  run_stage("samples", [&] {
    samples = select_samples(ens, trained.validation, cfg.sample_count);
    std::ofstream out = open_out(out_dir / "samples.jsonl");
    for (std::size_t k = 0; k < samples.size(); ++k) {
      json j;
      j["index"] = k;
      j["label"] = samples.labels[k];
      j["shape"] = samples.inputs[k].shape;
      j["data"] = samples.inputs[k].data;
      out << j.dump() << "\n";
    }
  });

  std::vector<AdversarialExample> sweep;
  run_stage("attack", [&] {
    std::vector<int> targets(ens.label_count);
    for (std::size_t t = 0; t < ens.label_count; ++t) targets[t] = static_cast<int>(t);
    AttackConfig acfg = cfg.attack;
    acfg.seed = rng::derive(cfg.root_seed, kSweepTag);
    if (acfg.surface.noisy && acfg.surface.sigma == 0.0) {
      acfg.surface.sigma = cfg.noise_sigma;
    }
    sweep = single_network_sweep(ens, samples, targets, acfg);
    write_examples_jsonl(sweep, (out_dir / "examples_sn.jsonl").string());
  });

  std::vector<AdversarialExample> si2, si3;
  run_stage("superimpose", [&] {
    si2 = build_superimpositions(samples, sweep, 2);
    si3 = build_superimpositions(samples, sweep, 3);
    write_examples_jsonl(si2, (out_dir / "examples_si2.jsonl").string());
    write_examples_jsonl(si3, (out_dir / "examples_si3.jsonl").string());
  });

  const std::vector<PolicyVariant> variants = make_policy_variants(cfg);
  run_stage("evaluate", [&] {
    const QueryPolicy plain = variants[0].policy;
    QueryPolicy nl = variants[1].policy;
    const struct {
      const char* name;
      const std::vector<AdversarialExample>* examples;
    } sets[] = {{"sn", &sweep}, {"si2", &si2}, {"si3", &si3}};
    for (const auto& set : sets) {
      const OutcomeTable table = evaluate_outcomes(ens, samples, *set.examples, variants);
      std::vector<std::pair<std::string, SingleNetworkSummary>> singles;
      singles.emplace_back("single",
                           mean_member_outcomes(ens, samples, *set.examples, plain));
      singles.emplace_back("single+NL",
                           mean_member_outcomes(ens, samples, *set.examples, nl));
      write_outcomes_csv(out_dir / (std::string("outcomes_") + set.name + ".csv"),
                         table, singles);
    }
  });

  run_stage("transfer", [&] {
    const BinSeries series = transfer_series(ens, samples, sweep, cfg.bin_count);
    write_transfer_csv(out_dir / "transfer_sn.csv", series);
  });

  run_stage("grid", [&] {
    const Tensor& s = samples.inputs.front();
    int target = samples.labels.front() == 0 ? 1 : 0;
    AttackConfig clean_cfg = cfg.attack;
    clean_cfg.surface = AttackSurface::clean_logits();
    QueryPolicy plain_policy = variants[0].policy;
    write_grid_csv(out_dir / "grid_clean.csv",
                   network_grid(ens, s, target, clean_cfg, plain_policy,
                                rng::derive(cfg.root_seed, kGridCleanTag)));
    AttackConfig noisy_cfg = cfg.attack;
    noisy_cfg.surface = AttackSurface::noisy_logits(cfg.noise_sigma);
    write_grid_csv(out_dir / "grid_noisy.csv",
                   network_grid(ens, s, target, noisy_cfg, plain_policy,
                                rng::derive(cfg.root_seed, kGridNoisyTag)));
  });

  run_stage("certify", [&] {
    const double sigma = cfg.certify_sigma > 0.0 ? cfg.certify_sigma : cfg.noise_sigma;
    const std::size_t cert_count = std::min(cfg.certify_samples, samples.size());

    std::ofstream certs = open_out(out_dir / "certificates.jsonl");
    std::ofstream rob = open_out(out_dir / "robustness.csv");
    rob << "sample,label,status,rv_pvalue,p_lower,radius,empirical_fraction,"
           "min_break_distortion\n";

    QueryPolicy break_policy;
    break_policy.noise_sigma = sigma;
    break_policy.seed = rng::derive(cfg.root_seed, kBreakQueryTag);

    std::vector<const std::vector<AdversarialExample>*> pools = {&sweep, &si2, &si3};
    for (std::size_t k = 0; k < cert_count; ++k) {
      CertifyConfig ccfg;
      ccfg.sigma = sigma;
      ccfg.n = cfg.certify_n;
      ccfg.alpha = cfg.certify_alpha;
      ccfg.seed = rng::derive(cfg.root_seed, kCertifyTag, k);
      ccfg.rv_alpha = cfg.rv_alpha;
      const Certificate cert = certify(ens, samples.inputs[k], ccfg);

      json line;
      line["sample"] = k;
      line["certificate"] = json::parse(certificate_to_json(cert));
      certs << line.dump() << "\n";

      double empirical = 0.0;
      if (cert.status == CertStatus::certified) {
        empirical = empirical_radius_check(ens, samples.inputs[k], cert,
                                           cfg.radius_check_trials,
                                           rng::derive(cfg.root_seed, kRadiusCheckTag, k));
      }

      // Smallest L2 distortion among crafted examples that break the noisy
      // prediction of this input.
      double min_break = -1.0;
      std::uint64_t query = 0;
      for (const auto* pool : pools) {
        for (const AdversarialExample& ex : *pool) {
          if (ex.source_index != k) continue;
          const VoteResult r =
              noisy_query(ens, ex.adversarial, break_policy,
                          (k + 1) * kAttackQueryBase + query++);
          if (r.label != cert.label) {
            const double dist = l2_distance(ex.adversarial, samples.inputs[k]);
            if (min_break < 0.0 || dist < min_break) min_break = dist;
          }
        }
      }

      rob << k << "," << cert.label << "," << cert_status_name(cert.status) << ","
          << csv_number(cert.rv_pvalue) << "," << csv_number(cert.p_lower) << ","
          << csv_number(cert.radius) << "," << csv_number(empirical) << ",";
      if (min_break >= 0.0) rob << csv_number(min_break);
      rob << "\n";
    }
  });

  run_stage("manifest", [&] {
    json manifest;
    manifest["toolkit_version"] = kVersion;
    manifest["model_format_version"] = kModelFormatVersion;
    manifest["config"] = json::parse(cfg.to_json());
    manifest["root_seed"] = cfg.root_seed;
    manifest["seeds"] = {
        {"dataset", rng::derive(cfg.root_seed, kDatasetTag)},
        {"partition", rng::derive(cfg.root_seed, kPartitionTag)},
        {"sweep", rng::derive(cfg.root_seed, kSweepTag)},
        {"grid_clean", rng::derive(cfg.root_seed, kGridCleanTag)},
        {"grid_noisy", rng::derive(cfg.root_seed, kGridNoisyTag)},
    };
    manifest["outputs"] = {
        "validation_accuracy.csv", "samples.jsonl",      "examples_sn.jsonl",
        "examples_si2.jsonl",      "examples_si3.jsonl", "outcomes_sn.csv",
        "outcomes_si2.csv",        "outcomes_si3.csv",   "transfer_sn.csv",
        "grid_clean.csv",          "grid_noisy.csv",     "certificates.jsonl",
        "robustness.csv",
    };
    std::ofstream out = open_out(out_dir / "manifest.json");
    out << manifest.dump(2) << "\n";
  });

  return out_dir.string();
}

}  // namespace certvote
