#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "certvote/errors.hpp"
#include "certvote/harness.hpp"
#include "certvote/parallel.hpp"
#include "oracles.hpp"

using namespace certvote;
namespace fs = std::filesystem;

namespace {

Tensor vec(std::vector<double> v) { return Tensor::vector1d(std::move(v)); }

ExperimentConfig smoke_config(const std::string& out_dir, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.dataset = "blobs";
  cfg.blob_classes = 3;
  cfg.blob_per_class = 30;
  cfg.blob_dim = 6;
  cfg.blob_spread = 0.08;
  cfg.members = 2;
  cfg.hidden_width = 16;
  cfg.train.learning_rate = 0.2;
  cfg.train.dropout_keep = 1.0;
  cfg.train.batch_size = 16;
  cfg.train.epochs = 15;
  cfg.noise_sigma = 0.05;
  cfg.attack.iterations = 60;
  cfg.attack.c_search_steps = 3;
  cfg.sample_count = 2;
  cfg.bin_count = 10;
  cfg.certify_n = 50;
  cfg.certify_samples = 1;
  cfg.radius_check_trials = 20;
  cfg.out_dir = out_dir;
  cfg.root_seed = seed;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Ensemble stub_ensemble(const std::vector<int>& forced, std::size_t label_count,
                       std::size_t dim) {
  Ensemble ens;
  ens.label_count = label_count;
  for (int label : forced) {
    ens.members.push_back(oracles::constant_network(dim, label_count, label));
  }
  return ens;
}

AdversarialExample zero_delta_example(const Tensor& s, std::size_t source, int target) {
  AdversarialExample ex;
  ex.source_index = source;
  ex.original = s;
  ex.adversarial = s;
  ex.delta = Tensor::zeros(s.shape);
  ex.target = target;
  ex.crafted_on = 0;
  ex.perturbation = 0.0;
  ex.success_on_crafted = false;
  return ex;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("member temperatures follow T_l = 10 * l") {
  const auto temps = member_temperatures(3, 10.0);
  CHECK(temps == std::vector<double>{10.0, 20.0, 30.0});
}

TEST_CASE("config: key=value parsing, JSON parsing, unknown keys") {
  const fs::path dir = fs::temp_directory_path() / "certvote_cfg_test";
  fs::create_directories(dir);

  {
    std::ofstream out(dir / "exp.cfg");
    out << "# comment\n"
        << "members = 7\n"
        << "sigma=0.25\n"
        << "penalty=loss\n"
        << "epochs = 3\n";
  }
  const ExperimentConfig cfg = ExperimentConfig::from_file((dir / "exp.cfg").string());
  CHECK(cfg.members == 7);
  CHECK(cfg.noise_sigma == doctest::Approx(0.25));
  CHECK(cfg.attack.penalty_kind == PenaltyKind::loss);
  CHECK(cfg.train.epochs == 3);

  {
    std::ofstream out(dir / "exp.json");
    out << R"({"members": 4, "rv_alpha": 0.1, "dataset": "blobs"})";
  }
  const ExperimentConfig jcfg = ExperimentConfig::from_file((dir / "exp.json").string());
  CHECK(jcfg.members == 4);
  CHECK(jcfg.rv_alpha == doctest::Approx(0.1));

  ExperimentConfig bad;
  CHECK_THROWS_AS(bad.set_key("no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(bad.set_key("members", "many"), ConfigError);
}

TEST_CASE("train_ensemble: partitioned subsets are disjoint, temperatures applied") {
  ExperimentConfig cfg;
  cfg.blob_classes = 3;
  cfg.blob_per_class = 40;
  cfg.blob_dim = 6;
  cfg.members = 3;
  cfg.hidden_width = 12;
  cfg.train.epochs = 2;
  cfg.train.dropout_keep = 1.0;
  cfg.train.batch_size = 16;
  cfg.root_seed = 5;
  const Dataset full = synth_blobs(3, 40, 6, 0.08, 1);
  const TrainedEnsemble trained = train_ensemble(cfg, full);

  REQUIRE(trained.ensemble.size() == 3);
  CHECK(trained.ensemble.members[0].temperature == doctest::Approx(10.0));
  CHECK(trained.ensemble.members[1].temperature == doctest::Approx(20.0));
  CHECK(trained.ensemble.members[2].temperature == doctest::Approx(30.0));

  std::map<std::vector<double>, int> seen;
  for (const Dataset& part : trained.training_parts) {
    for (const Tensor& x : part.inputs) seen[x.data] += 1;
  }
  for (const auto& [data, count] : seen) CHECK(count == 1);
  CHECK(trained.validation.size() == full.size() / 4);
}

TEST_CASE("train_ensemble: conv architecture learns a two-class image task") {
  // Bright patch in the top-left vs bottom-right corner, 10x10 single-channel.
  Dataset full;
  full.name = "patches";
  rng::Stream stream(61);
  for (int i = 0; i < 120; ++i) {
    Tensor img = Tensor::zeros({10, 10});
    for (double& v : img.data) v = 0.1 * stream.next_unit();
    const int label = i % 2;
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        const std::size_t yy = label == 0 ? y : 6 + y;
        const std::size_t xx = label == 0 ? x : 6 + x;
        img.data[yy * 10 + xx] = 0.8 + 0.2 * stream.next_unit();
      }
    }
    full.inputs.push_back(std::move(img));
    full.labels.push_back(label);
  }

  ExperimentConfig cfg;
  cfg.members = 1;
  cfg.arch = "conv";
  cfg.conv_channels = 4;
  cfg.hidden_width = 8;
  cfg.train.learning_rate = 0.05;
  cfg.train.dropout_keep = 1.0;
  cfg.train.batch_size = 16;
  cfg.train.epochs = 30;
  cfg.root_seed = 62;
  const TrainedEnsemble trained = train_ensemble(cfg, full);
  CHECK(trained.ensemble.members[0].input_shape ==
        std::vector<std::size_t>{1, 10, 10});
  CHECK(trained.validation_accuracy[0] >= 0.9);
}

TEST_CASE("evaluate_outcomes: zero-delta examples reduce to clean accuracy") {
  const Ensemble ens = stub_ensemble({1, 1, 1}, 3, 4);
  Dataset samples;
  samples.inputs = {vec({0.1, 0.2, 0.3, 0.4}), vec({0.5, 0.6, 0.7, 0.8}),
                    vec({0.9, 0.8, 0.7, 0.6})};
  samples.labels = {1, 0, 1};  // constant-1 members: clean accuracy 2/3

  std::vector<AdversarialExample> examples;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    examples.push_back(zero_delta_example(samples.inputs[k], k, 2));
  }
  PolicyVariant plain{"ensemble", {}};
  const OutcomeTable table = evaluate_outcomes(ens, samples, examples, {plain});
  REQUIRE(table.rows.size() == 1);
  const OutcomeRow& row = table.rows[0];
  CHECK(row.clean_accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(row.correct_pct == doctest::Approx(100.0 * row.clean_accuracy));
  CHECK(row.correct_pct + row.target_pct + row.other_pct + row.abstain_pct ==
        doctest::Approx(100.0).epsilon(1e-4));
}

TEST_CASE("evaluate_outcomes: target-stub ensemble scores 100% target") {
  const Ensemble ens = stub_ensemble({2, 2, 2}, 4, 4);
  Dataset samples;
  samples.inputs = {vec({0.1, 0.2, 0.3, 0.4})};
  samples.labels = {0};
  const std::vector<AdversarialExample> examples = {
      zero_delta_example(samples.inputs[0], 0, 2)};
  PolicyVariant plain{"ensemble", {}};
  const OutcomeTable table = evaluate_outcomes(ens, samples, examples, {plain});
  CHECK(table.rows[0].target_pct == doctest::Approx(100.0));
  CHECK(table.rows[0].attack_accuracy == doctest::Approx(0.0));
}

TEST_CASE("evaluate_outcomes: tallies are exclusive and exhaustive") {
  const Dataset ds = synth_blobs(4, 10, 5, 0.15, 9);
  Ensemble ens = stub_ensemble({0, 1, 2, 3, 1}, 4, 5);
  Dataset samples;
  samples.inputs = {ds.inputs[0], ds.inputs[11], ds.inputs[22]};
  samples.labels = {ds.labels[0], ds.labels[11], ds.labels[22]};
  std::vector<AdversarialExample> examples;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    for (int t = 0; t < 4; ++t) {
      examples.push_back(zero_delta_example(samples.inputs[k], k, t));
    }
  }
  const auto variants = make_policy_variants(smoke_config("unused", 3));
  const OutcomeTable table = evaluate_outcomes(ens, samples, examples, variants);
  for (const OutcomeRow& row : table.rows) {
    CHECK(row.correct_pct + row.target_pct + row.other_pct + row.abstain_pct ==
          doctest::Approx(100.0).epsilon(1e-4));
    CHECK(row.answered_only_accuracy >= row.attack_accuracy - 1e-12);
  }
}

TEST_CASE("transfer_series: zero deltas produce zero flips") {
  const Ensemble ens = stub_ensemble({0, 1, 2}, 3, 4);
  Dataset samples;
  samples.inputs = {vec({0.2, 0.4, 0.6, 0.8})};
  samples.labels = {0};
  const std::vector<AdversarialExample> examples = {
      zero_delta_example(samples.inputs[0], 0, 1)};
  const BinSeries series = transfer_series(ens, samples, examples, 5);
  for (std::size_t b = 0; b < 5; ++b) {
    CHECK(series.flip_to_target_mean[b] == 0.0);
    CHECK(series.flip_to_other_mean[b] == 0.0);
    CHECK(series.ens_to_target_count[b] == 0);
    CHECK(series.ens_to_other_count[b] == 0);
  }
  CHECK(series.example_count[0] == 1);
}

TEST_CASE("transfer_series: hand-counted single flip to the target") {
  // One boundary member flips to class 1 when x0 crosses 0.5; three
  // constant-0 members never flip.
  Ensemble ens;
  ens.label_count = 2;
  ens.members.push_back(oracles::coin_network(4));
  for (int i = 0; i < 3; ++i) {
    ens.members.push_back(oracles::constant_network(4, 2, 0));
  }
  Dataset samples;
  samples.inputs = {vec({0.3, 0.5, 0.5, 0.5})};
  samples.labels = {0};

  AdversarialExample ex = zero_delta_example(samples.inputs[0], 0, 1);
  ex.adversarial = vec({0.9, 0.5, 0.5, 0.5});
  ex.delta = subtract(ex.adversarial, ex.original);
  ex.perturbation = perturbation(ex.adversarial, ex.original);

  const BinSeries series = transfer_series(ens, samples, {ex}, 4);
  // The single example lands in the last bin (perturbation equals the max).
  CHECK(series.example_count[3] == 1);
  CHECK(series.flip_to_target_mean[3] == doctest::Approx(1.0));
  CHECK(series.flip_to_other_mean[3] == doctest::Approx(0.0));
  // 1-vs-3 vote: the ensemble stays at 0, so no aggregate change.
  CHECK(series.ens_to_target_count[3] == 0);
  CHECK(series.ens_accuracy[3] == doctest::Approx(1.0));
}

TEST_CASE("transfer_series: flip conservation across bins") {
  const Dataset ds = synth_blobs(3, 20, 6, 0.1, 33);
  ExperimentConfig cfg;
  cfg.blob_classes = 3;
  cfg.members = 3;
  cfg.hidden_width = 12;
  cfg.train.epochs = 4;
  cfg.train.dropout_keep = 1.0;
  cfg.train.batch_size = 16;
  cfg.root_seed = 44;
  const TrainedEnsemble trained = train_ensemble(cfg, ds);

  Dataset samples;
  samples.inputs = {trained.validation.inputs[0], trained.validation.inputs[1]};
  samples.labels = {trained.validation.labels[0], trained.validation.labels[1]};

  AttackConfig acfg;
  acfg.iterations = 60;
  acfg.c_search_steps = 3;
  acfg.seed = 9;
  const auto sweep = single_network_sweep(trained.ensemble, samples, {0, 1, 2}, acfg);
  const BinSeries series = transfer_series(trained.ensemble, samples, sweep, 7);

  // Recount without binning.
  std::size_t total_member_flips = 0;
  std::size_t total_ens_changes = 0;
  for (const auto& ex : sweep) {
    for (std::size_t l = 0; l < trained.ensemble.size(); ++l) {
      const int cl = predict_label(trained.ensemble.members[l],
                                   samples.inputs[ex.source_index]);
      const int al = predict_label(trained.ensemble.members[l], ex.adversarial);
      if (cl != al) ++total_member_flips;
    }
    const int ce = vote(trained.ensemble, samples.inputs[ex.source_index]).label;
    const int ae = vote(trained.ensemble, ex.adversarial).label;
    if (ce != ae) ++total_ens_changes;
  }
  std::size_t binned_flips = 0, binned_changes = 0, binned_examples = 0;
  for (std::size_t b = 0; b < 7; ++b) {
    binned_flips += series.member_flip_count[b];
    binned_changes += series.ens_to_target_count[b] + series.ens_to_other_count[b];
    binned_examples += series.example_count[b];
  }
  CHECK(binned_flips == total_member_flips);
  CHECK(binned_changes == total_ens_changes);
  CHECK(binned_examples == sweep.size());
}

TEST_CASE("network_grid: clean crafting against undefended members hits the target") {
  Ensemble ens;
  ens.label_count = 3;
  for (int i = 0; i < 4; ++i) ens.members.push_back(oracles::identity_network(3));
  const Tensor s = vec({0.1, 0.7, 0.2});
  AttackConfig acfg;
  acfg.iterations = 80;
  acfg.c_search_steps = 4;
  QueryPolicy plain;
  const auto grid = network_grid(ens, s, 0, acfg, plain, 12);
  REQUIRE(grid.size() == 4);
  for (int label : grid) CHECK(label == 0);
}

TEST_CASE("worker cap and schedule independence") {
  // A 20-member ensemble exercises the parallel fan-out in vote(); capping
  // the workers to one must not change any count.
  Ensemble ens;
  ens.label_count = 5;
  for (int i = 0; i < 20; ++i) {
    ens.members.push_back(oracles::constant_network(6, 5, i % 5));
  }
  const Tensor x = oracles::random_unit_tensor({6}, 90);
  const VoteResult parallel = vote(ens, x);

  setenv("CERTVOTE_THREADS", "1", 1);
  CHECK(worker_count() == 1);
  const VoteResult serial = vote(ens, x);
  unsetenv("CERTVOTE_THREADS");

  CHECK(parallel.label == serial.label);
  CHECK(parallel.counts == serial.counts);
  CHECK(parallel.top_count == serial.top_count);
  for (int c : parallel.counts) CHECK(c == 4);
}

TEST_CASE("network_grid: stub members report their constant labels") {
  const Ensemble ens = stub_ensemble({3, 1, 3, 2, 0}, 4, 4);
  const Tensor s = vec({0.2, 0.4, 0.6, 0.8});
  AttackConfig acfg;
  acfg.iterations = 5;
  acfg.c_search_steps = 1;
  QueryPolicy plain;
  const auto grid = network_grid(ens, s, 1, acfg, plain, 3);
  REQUIRE(grid.size() == 5);
  // Constant members ignore the crafted input entirely.
  CHECK(grid == std::vector<int>{3, 1, 3, 2, 0});
}

TEST_CASE("pipeline: smoke run writes every artifact and closes percentages") {
  const fs::path out = fs::temp_directory_path() / "certvote_pipe_smoke";
  fs::remove_all(out);
  const ExperimentConfig cfg = smoke_config(out.string(), 31);
  const std::string dir = run_pipeline(cfg);
  CHECK(dir == out.string());

  for (const char* name :
       {"manifest.json", "validation_accuracy.csv", "samples.jsonl",
        "examples_sn.jsonl", "outcomes_sn.csv", "transfer_sn.csv",
        "grid_clean.csv", "grid_noisy.csv", "certificates.jsonl",
        "robustness.csv"}) {
    CHECK_MESSAGE(fs::exists(out / name), name);
  }

  // Row closure on every outcomes table.
  for (const char* name : {"outcomes_sn.csv", "outcomes_si2.csv", "outcomes_si3.csv"}) {
    std::ifstream in(out / name);
    REQUIRE(in);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.rfind("single", 0) == 0) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      REQUIRE(cells.size() == 15);
      if (std::stod(cells[14]) > 0) {  // rows with at least one example
        const double sum = std::stod(cells[5]) + std::stod(cells[6]) +
                           std::stod(cells[7]) + std::stod(cells[8]);
        CHECK(sum == doctest::Approx(100.0).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("pipeline: identical seed reruns are byte-identical") {
  const fs::path out = fs::temp_directory_path() / "certvote_pipe_repeat";
  fs::remove_all(out);
  const ExperimentConfig cfg = smoke_config(out.string(), 77);

  run_pipeline(cfg);
  std::map<std::string, std::string> first;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (entry.is_regular_file()) {
      first[entry.path().string()] = slurp(entry.path());
    }
  }
  run_pipeline(cfg);
  for (const auto& [path, bytes] : first) {
    CHECK_MESSAGE(slurp(path) == bytes, path);
  }
}

TEST_CASE("pipeline: stage failures carry the stage name") {
  ExperimentConfig cfg = smoke_config(
      (fs::temp_directory_path() / "certvote_pipe_fail").string(), 1);
  cfg.dataset = "idx";
  cfg.idx_images = "/nonexistent/images";
  cfg.idx_labels = "/nonexistent/labels";
  try {
    run_pipeline(cfg);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("stage 'data'") != std::string::npos);
  }
}

#ifdef CERTVOTE_CLI_PATH
TEST_CASE("cli: exit codes for config and data errors") {
  const std::string cli = CERTVOTE_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
    return status == -1 ? -1 : WEXITSTATUS(status);
  };
  CHECK(run("--help") == 0);
  CHECK(run("pipeline --config /nonexistent.cfg") == 2);
  CHECK(run("evaluate --out /nonexistent_dir") == 3);
  CHECK(run("train --members 0") == 2);
}
#endif

}  // TEST_SUITE
