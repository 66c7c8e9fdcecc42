// certvote command-line driver: train temperature ensembles, craft and
// compose adversarial examples, evaluate defense variants, and certify
// robustness radii. See README.md for the config keys.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>

#include "certvote/certify.hpp"
#include "certvote/errors.hpp"
#include "certvote/harness.hpp"
#include "certvote/model_io.hpp"
#include "certvote/rng.hpp"
#include "certvote/version.hpp"

namespace fs = std::filesystem;
using namespace certvote;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> members;
  std::optional<double> sigma;
  std::optional<double> rv_alpha;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path,
                  "Experiment config file (key=value lines or JSON)");
  cmd->add_option("--seed", flags.seed, "Root seed (overrides config)");
  cmd->add_option("--out", flags.out, "Output directory (overrides config)");
  cmd->add_option("--members", flags.members, "Ensemble size (overrides config)");
  cmd->add_option("--sigma", flags.sigma, "Noise sigma (overrides config)");
  cmd->add_option("--rv-alpha", flags.rv_alpha,
                  "Rank-verification significance (overrides config)");
}

ExperimentConfig resolve_config(const CommonFlags& flags) {
  ExperimentConfig cfg;
  if (!flags.config_path.empty()) cfg = ExperimentConfig::from_file(flags.config_path);
  if (flags.seed) cfg.root_seed = *flags.seed;
  if (flags.out) cfg.out_dir = *flags.out;
  if (flags.members) cfg.members = *flags.members;
  if (flags.sigma) cfg.noise_sigma = *flags.sigma;
  if (flags.rv_alpha) cfg.rv_alpha = *flags.rv_alpha;
  cfg.validate();
  return cfg;
}

Dataset build_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset == "blobs") {
    return synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim,
                       cfg.blob_spread, rng::derive(cfg.root_seed, 0x01));
  }
  return load_idx(cfg.idx_images, cfg.idx_labels);
}

Ensemble load_ensemble(const fs::path& dir) {
  const fs::path models = dir / "models";
  if (!fs::exists(models)) throw DataError("no models/ directory under " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(models)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  if (files.empty()) throw DataError("no model files under " + models.string());
  std::sort(files.begin(), files.end());
  Ensemble ens;
  for (const auto& file : files) ens.members.push_back(load_network(file.string()));
  ens.label_count = ens.members.front().label_count;
  ens.validate();
  return ens;
}

Dataset load_samples(const fs::path& dir) {
  const fs::path path = dir / "samples.jsonl";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset samples;
  samples.name = "attack-samples";
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      samples.labels.push_back(j.at("label").get<int>());
      samples.inputs.push_back(Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                                      j.at("data").get<std::vector<double>>()));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("samples.jsonl: ") + e.what());
    }
  }
  if (samples.size() == 0) throw DataError("samples.jsonl is empty");
  return samples;
}

void write_samples(const Dataset& samples, const fs::path& dir) {
  std::ofstream out(dir / "samples.jsonl", std::ios::binary);
  if (!out) throw DataError("cannot write samples.jsonl");
  for (std::size_t k = 0; k < samples.size(); ++k) {
    nlohmann::json j;
    j["index"] = k;
    j["label"] = samples.labels[k];
    j["shape"] = samples.inputs[k].shape;
    j["data"] = samples.inputs[k].data;
    out << j.dump() << "\n";
  }
}

int cmd_train(const ExperimentConfig& cfg) {
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir / "models");
  const Dataset full = build_dataset(cfg);
  const TrainedEnsemble trained = train_ensemble(cfg, full);
  const auto temps = member_temperatures(cfg.members, cfg.temperature_base);

  std::ofstream acc(out_dir / "validation_accuracy.csv", std::ios::binary);
  acc << "member,temperature,validation_accuracy\n";
  for (std::size_t l = 0; l < cfg.members; ++l) {
    char name[64];
    std::snprintf(name, sizeof(name), "member_%03zu.json", l);
    save_network(trained.ensemble.members[l], (out_dir / "models" / name).string());
    acc << l << "," << csv_number(temps[l]) << ","
        << csv_number(trained.validation_accuracy[l]) << "\n";
    std::cout << "member " << l << " (T=" << temps[l]
              << ") validation accuracy " << trained.validation_accuracy[l] << "\n";
  }

  Dataset samples;
  samples.name = "attack-samples";
  for (std::size_t k = 0; k < trained.validation.size() && samples.size() < cfg.sample_count; ++k) {
    if (vote(trained.ensemble, trained.validation.inputs[k]).label ==
        trained.validation.labels[k]) {
      samples.inputs.push_back(trained.validation.inputs[k]);
      samples.labels.push_back(trained.validation.labels[k]);
    }
  }
  for (std::size_t k = 0; k < trained.validation.size() && samples.size() < cfg.sample_count; ++k) {
    if (vote(trained.ensemble, trained.validation.inputs[k]).label !=
        trained.validation.labels[k]) {
      samples.inputs.push_back(trained.validation.inputs[k]);
      samples.labels.push_back(trained.validation.labels[k]);
    }
  }
  write_samples(samples, out_dir);
  std::cout << "wrote " << cfg.members << " models and " << samples.size()
            << " attack samples to " << out_dir.string() << "\n";
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg) {
  const fs::path out_dir(cfg.out_dir);
  const Ensemble ens = load_ensemble(out_dir);
  const Dataset samples = load_samples(out_dir);
  std::vector<int> targets(ens.label_count);
  for (std::size_t t = 0; t < ens.label_count; ++t) targets[t] = static_cast<int>(t);
  AttackConfig acfg = cfg.attack;
  acfg.seed = rng::derive(cfg.root_seed, 0x30);
  if (acfg.surface.noisy && acfg.surface.sigma == 0.0) acfg.surface.sigma = cfg.noise_sigma;
  const auto sweep = single_network_sweep(ens, samples, targets, acfg);
  write_examples_jsonl(sweep, (out_dir / "examples_sn.jsonl").string());
  std::size_t successes = 0;
  for (const auto& ex : sweep) successes += ex.success_on_crafted ? 1 : 0;
  std::cout << "crafted " << sweep.size() << " examples, " << successes
            << " successful on their crafted member\n";
  return 0;
}

int cmd_superimpose(const ExperimentConfig& cfg, const std::string& examples_path, int k) {
  const fs::path out_dir(cfg.out_dir);
  const Dataset samples = load_samples(out_dir);
  const std::string in_path =
      examples_path.empty() ? (out_dir / "examples_sn.jsonl").string() : examples_path;
  const auto sweep = read_examples_jsonl(in_path);

  std::map<std::pair<std::size_t, int>, std::vector<AdversarialExample>> groups;
  for (const auto& ex : sweep) groups[{ex.source_index, ex.target}].push_back(ex);
  std::vector<AdversarialExample> composites;
  for (const auto& [key, group] : groups) {
    std::size_t successes = 0;
    for (const auto& ex : group) successes += ex.success_on_crafted ? 1 : 0;
    if (successes < static_cast<std::size_t>(k)) continue;
    AdversarialExample si;
    si.source_index = key.first;
    si.target = key.second;
    si.crafted_on = -1;
    si.original = samples.inputs[key.first];
    si.adversarial = superimpose(group, k);
    si.delta = subtract(si.adversarial, si.original);
    si.perturbation = perturbation(si.adversarial, si.original);
    composites.push_back(std::move(si));
  }
  const std::string out_path =
      (out_dir / ("examples_si" + std::to_string(k) + ".jsonl")).string();
  write_examples_jsonl(composites, out_path);
  std::cout << "wrote " << composites.size() << " SI" << k << " composites to "
            << out_path << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& examples_path) {
  const fs::path out_dir(cfg.out_dir);
  const Ensemble ens = load_ensemble(out_dir);
  const Dataset samples = load_samples(out_dir);
  const std::string in_path =
      examples_path.empty() ? (out_dir / "examples_sn.jsonl").string() : examples_path;
  const auto examples = read_examples_jsonl(in_path);
  const auto variants = make_policy_variants(cfg);
  const OutcomeTable table = evaluate_outcomes(ens, samples, examples, variants);

  std::cout << "model,clean_accuracy,attack_accuracy,answered_only,correct%,target%,"
               "other%,abstain%\n";
  for (const auto& r : table.rows) {
    std::cout << r.model << "," << csv_number(r.clean_accuracy) << ","
              << csv_number(r.attack_accuracy) << ","
              << csv_number(r.answered_only_accuracy) << ","
              << csv_number(r.correct_pct) << "," << csv_number(r.target_pct) << ","
              << csv_number(r.other_pct) << "," << csv_number(r.abstain_pct) << "\n";
  }
  return 0;
}

int cmd_certify(const ExperimentConfig& cfg) {
  const fs::path out_dir(cfg.out_dir);
  const Ensemble ens = load_ensemble(out_dir);
  const Dataset samples = load_samples(out_dir);
  const double sigma = cfg.certify_sigma > 0.0 ? cfg.certify_sigma : cfg.noise_sigma;
  const std::size_t count = std::min(cfg.certify_samples, samples.size());

  std::ofstream certs(out_dir / "certificates.jsonl", std::ios::binary);
  for (std::size_t k = 0; k < count; ++k) {
    CertifyConfig ccfg;
    ccfg.sigma = sigma;
    ccfg.n = cfg.certify_n;
    ccfg.alpha = cfg.certify_alpha;
    ccfg.seed = rng::derive(cfg.root_seed, 0x40, k);
    ccfg.rv_alpha = cfg.rv_alpha;
    const Certificate cert = certify(ens, samples.inputs[k], ccfg);
    nlohmann::json line;
    line["sample"] = k;
    line["certificate"] = nlohmann::json::parse(certificate_to_json(cert));
    certs << line.dump() << "\n";
    std::cout << "sample " << k << ": label " << cert.label << " status "
              << cert_status_name(cert.status) << " p_lower " << cert.p_lower
              << " radius " << cert.radius << "\n";
  }
  return 0;
}

int cmd_grid(const ExperimentConfig& cfg, std::size_t sample_index, int target,
             bool noisy_surface) {
  const fs::path out_dir(cfg.out_dir);
  const Ensemble ens = load_ensemble(out_dir);
  const Dataset samples = load_samples(out_dir);
  if (sample_index >= samples.size()) throw ConfigError("grid: sample index out of range");
  if (target < 0) target = samples.labels[sample_index] == 0 ? 1 : 0;

  AttackConfig acfg = cfg.attack;
  acfg.surface = noisy_surface ? AttackSurface::noisy_logits(cfg.noise_sigma)
                               : AttackSurface::clean_logits();
  QueryPolicy plain;
  plain.seed = rng::derive(cfg.root_seed, 0x20, 0);
  const auto grid = network_grid(ens, samples.inputs[sample_index], target, acfg,
                                 plain, rng::derive(cfg.root_seed, 0x31));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::cout << grid[i] << (((i + 1) % 5 == 0 || i + 1 == grid.size()) ? "\n" : " ");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certvote: temperature-ensemble voting defense with noisy logits, "
               "rank verification, and Monte Carlo robustness certification"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonFlags flags;
  std::string examples_path;
  int si_k = 2;
  std::size_t grid_sample = 0;
  int grid_target = -1;
  bool grid_noisy = false;

  CLI::App* train_cmd = app.add_subcommand("train", "Train the ensemble and pick attack samples");
  add_common(train_cmd, flags);
  CLI::App* attack_cmd = app.add_subcommand("attack", "Craft the single-network sweep");
  add_common(attack_cmd, flags);
  CLI::App* si_cmd = app.add_subcommand("superimpose", "Build greedy SI composites");
  add_common(si_cmd, flags);
  si_cmd->add_option("--examples", examples_path, "Examples JSONL (default examples_sn.jsonl)");
  si_cmd->add_option("--k", si_k, "Composite size")->check(CLI::Range(1, 16));
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Outcome table for an example set");
  add_common(eval_cmd, flags);
  eval_cmd->add_option("--examples", examples_path, "Examples JSONL (default examples_sn.jsonl)");
  CLI::App* cert_cmd = app.add_subcommand("certify", "Certify radii for the sample set");
  add_common(cert_cmd, flags);
  CLI::App* pipe_cmd = app.add_subcommand("pipeline", "Run the full experiment pipeline");
  add_common(pipe_cmd, flags);
  CLI::App* grid_cmd = app.add_subcommand("grid", "Per-member classification grid");
  add_common(grid_cmd, flags);
  grid_cmd->add_option("--sample-index", grid_sample, "Attack sample index");
  grid_cmd->add_option("--target", grid_target, "Target label (default: 0 or 1)");
  grid_cmd->add_flag("--noisy", grid_noisy, "Craft against the noisy-logit surface");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = resolve_config(flags);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (attack_cmd->parsed()) return cmd_attack(cfg);
    if (si_cmd->parsed()) return cmd_superimpose(cfg, examples_path, si_k);
    if (eval_cmd->parsed()) return cmd_evaluate(cfg, examples_path);
    if (cert_cmd->parsed()) return cmd_certify(cfg);
    if (grid_cmd->parsed()) return cmd_grid(cfg, grid_sample, grid_target, grid_noisy);
    if (pipe_cmd->parsed()) {
      const std::string dir = run_pipeline(cfg);
      std::cout << "pipeline outputs written to " << dir << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
