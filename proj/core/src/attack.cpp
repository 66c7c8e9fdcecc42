#include "certvote/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "certvote/errors.hpp"
#include "certvote/parallel.hpp"
#include "certvote/rng.hpp"

namespace certvote {

namespace {

using nlohmann::json;

// The attacker's oracle. On a noisy surface every query evaluates the
// genuine network at a freshly noise-perturbed input, so iterative schemes
// never see two consistent responses.
class SurfaceOracle {
 public:
  SurfaceOracle(const Network& net, const AttackSurface& surface, std::uint64_t seed)
      : net_(net), surface_(surface), stream_(rng::derive(seed, 0xa77acc)) {}

  Tensor query_logits(const Tensor& x) { return logits(net_, seen_input(x)); }

  int query_label(const Tensor& x) {
    const Tensor z = query_logits(x);
    return argmax_label(std::span<const double>(z.data));
  }

  Tensor query_gradient(const Tensor& x, const LogitObjective& objective) {
    return input_gradient(net_, seen_input(x), objective);
  }

 private:
  Tensor seen_input(const Tensor& x) {
    if (!surface_.noisy) return x;
    Tensor noisy = x;
    for (double& v : noisy.data) v += surface_.sigma * stream_.next_gaussian();
    return noisy;
  }

  const Network& net_;
  AttackSurface surface_;
  rng::Stream stream_;
};

LogitObjective make_penalty(PenaltyKind kind, int target, double kappa,
                            double temperature) {
  const auto t = static_cast<std::size_t>(target);
  if (kind == PenaltyKind::margin) {
    LogitObjective obj;
    obj.value = [t, kappa](std::span<const double> z) {
      return margin_penalty(z, static_cast<int>(t), kappa);
    };
    obj.grad = [t, kappa](std::span<const double> z) {
      std::vector<double> g(z.size(), 0.0);
      std::size_t best = t == 0 ? 1 : 0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (i != t && z[i] > z[best]) best = i;
      }
      if (z[best] - z[t] > -kappa) {
        g[best] = 1.0;
        g[t] = -1.0;
      }
      return g;
    };
    return obj;
  }
  // Loss penalty: cross-entropy of the temperature softmax against the
  // target, computed through log-sum-exp of z/T.
  LogitObjective obj;
  obj.value = [t, temperature](std::span<const double> z) {
    const double zmax = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double v : z) acc += std::exp((v - zmax) / temperature);
    return zmax / temperature + std::log(acc) - z[t] / temperature;
  };
  obj.grad = [t, temperature](std::span<const double> z) {
    std::vector<double> g = softmax_t(z, temperature);
    g[t] -= 1.0;
    for (double& v : g) v /= temperature;
    return g;
  };
  return obj;
}

Tensor from_tanh_space(const std::vector<double>& w,
                       const std::vector<std::size_t>& shape) {
  std::vector<double> x(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) x[i] = 0.5 * (std::tanh(w[i]) + 1.0);
  return Tensor(shape, std::move(x));
}

struct RoundOutcome {
  bool succeeded = false;
  Tensor best_success;       // smallest-distance successful iterate
  double success_dist = std::numeric_limits<double>::infinity();
  Tensor best_failed;        // lowest-objective iterate
  double failed_value = std::numeric_limits<double>::infinity();
};

}  // namespace

void AttackConfig::validate() const {
  if (!(c_init > 0.0)) throw ConfigError("attack: c_init must be positive");
  if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if (c_search_steps < 0) throw ConfigError("attack: c_search_steps must be >= 0");
  if (!(step_size > 0.0)) throw ConfigError("attack: step_size must be positive");
  if (kappa < 0.0) throw ConfigError("attack: kappa must be non-negative");
  if (surface.noisy && surface.sigma < 0.0) {
    throw ConfigError("attack: surface sigma must be >= 0");
  }
}

double perturbation(const Tensor& a, const Tensor& s) {
  if (!a.same_shape(s)) throw ShapeError("perturbation: shape mismatch");
  const double denom = l2_norm(s);
  if (denom == 0.0) {
    throw ConfigError("perturbation: undefined for a zero original input");
  }
  return l2_distance(a, s) / denom;
}

double margin_penalty(std::span<const double> z, int target, double kappa) {
  if (target < 0 || static_cast<std::size_t>(target) >= z.size()) {
    throw ConfigError("margin_penalty: target out of range");
  }
  const auto t = static_cast<std::size_t>(target);
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (i != t) other = std::max(other, z[i]);
  }
  return std::max(other - z[t], -kappa);
}

AdversarialExample craft(const Network& net, const Tensor& s, int target,
                         const AttackConfig& cfg, std::size_t source_index,
                         int crafted_on, std::vector<CraftTraceRow>* trace) {
  cfg.validate();
  if (target < 0 || static_cast<std::size_t>(target) >= net.label_count) {
    throw ConfigError("craft: target label out of range");
  }
  if (s.shape != net.input_shape) throw ShapeError("craft: sample shape mismatch");

  AdversarialExample ex;
  ex.source_index = source_index;
  ex.original = s;
  ex.target = target;
  ex.crafted_on = crafted_on;

  SurfaceOracle oracle(net, cfg.surface, cfg.seed);

  // Already classified as the target: the zero-perturbation example is
  // optimal, return it without touching the optimizer.
  if (oracle.query_label(s) == target) {
    ex.adversarial = s;
    ex.delta = Tensor::zeros(s.shape);
    ex.perturbation = 0.0;
    ex.success_on_crafted = predict_label(net, s) == target;
    return ex;
  }

  const LogitObjective penalty =
      make_penalty(cfg.penalty_kind, target, cfg.kappa, net.temperature);

  // tanh-space seed point; clamping keeps atanh finite at the box walls.
  std::vector<double> w0(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = std::clamp(s[i], 1e-6, 1.0 - 1e-6);
    w0[i] = std::atanh(2.0 * v - 1.0);
  }

  Tensor global_best_success;
  double global_success_dist = std::numeric_limits<double>::infinity();
  Tensor global_best_failed;
  double global_failed_value = std::numeric_limits<double>::infinity();

  auto run_round = [&](double c) {
    RoundOutcome round;
    std::vector<double> w = w0;
    std::vector<double> m(w.size(), 0.0);
    std::vector<double> v(w.size(), 0.0);
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    auto consider = [&](const Tensor& candidate) {
      const double dist = l2_distance(candidate, s);
      const Tensor z = oracle.query_logits(candidate);
      const double pen = penalty.value(std::span<const double>(z.data));
      const double objective_value = c * dist * dist + pen;
      const bool hit = argmax_label(std::span<const double>(z.data)) == target;
      if (hit && dist < round.success_dist) {
        round.succeeded = true;
        round.success_dist = dist;
        round.best_success = candidate;
      }
      if (objective_value < round.failed_value) {
        round.failed_value = objective_value;
        round.best_failed = candidate;
      }
    };

    for (int iter = 0; iter < cfg.iterations; ++iter) {
      const Tensor x = from_tanh_space(w, s.shape);
      consider(x);

      const Tensor pen_grad = oracle.query_gradient(x, penalty);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gx = 2.0 * c * (x[i] - s[i]) + pen_grad[i];
        const double th = std::tanh(w[i]);
        const double gw = gx * 0.5 * (1.0 - th * th);
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gw;
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gw * gw;
        const double mhat = m[i] / (1.0 - std::pow(kBeta1, iter + 1));
        const double vhat = v[i] / (1.0 - std::pow(kBeta2, iter + 1));
        w[i] -= cfg.step_size * mhat / (std::sqrt(vhat) + kEps);
        if (!std::isfinite(w[i])) {
          throw NumericError("craft: optimizer diverged to a non-finite iterate");
        }
      }
    }
    consider(from_tanh_space(w, s.shape));

    if (round.succeeded && round.success_dist < global_success_dist) {
      global_success_dist = round.success_dist;
      global_best_success = round.best_success;
    }
    if (round.failed_value < global_failed_value) {
      global_failed_value = round.failed_value;
      global_best_failed = round.best_failed;
    }
    if (trace) {
      trace->push_back({c, round.succeeded,
                        round.succeeded ? round.success_dist : 0.0,
                        std::isfinite(global_success_dist) ? global_success_dist
                                                           : 0.0});
    }
    return round.succeeded;
  };

  // Walk c to the success/failure boundary. Larger c weights the distance
  // term more, so successes live at small c; the escalation direction
  // depends on which side c_init lands on.
  double c = cfg.c_init;
  bool first = run_round(c);
  double c_success = first ? c : 0.0;
  double c_failure = first ? 0.0 : c;
  bool have_bracket = false;
  for (int step = 0; step < cfg.c_search_steps && !have_bracket; ++step) {
    c *= 10.0;
    const bool hit = run_round(c);
    if (hit) {
      c_success = c;
      if (!first) have_bracket = true;  // failures below, success found
    } else {
      c_failure = c;
      if (first) have_bracket = true;  // successes below, failure found
    }
  }
  if (have_bracket) {
    for (int step = 0; step < cfg.c_search_steps; ++step) {
      const double mid = std::sqrt(c_success * c_failure);
      if (run_round(mid)) {
        c_success = mid;
      } else {
        c_failure = mid;
      }
    }
  }

  if (std::isfinite(global_success_dist)) {
    ex.adversarial = global_best_success;
  } else {
    ex.adversarial = global_best_failed.size() > 0 ? global_best_failed : s;
  }
  ex.delta = subtract(ex.adversarial, s);
  ex.perturbation = perturbation(ex.adversarial, s);
  ex.success_on_crafted = predict_label(net, ex.adversarial) == target;
  assert_finite(ex.adversarial, "craft");
  return ex;
}

Tensor superimpose(const std::vector<AdversarialExample>& examples, int k) {
  if (k < 1) throw ConfigError("superimpose: k must be >= 1");

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].success_on_crafted) pool.push_back(i);
  }
  if (pool.size() < static_cast<std::size_t>(k)) {
    throw InsufficientExamplesError(
        "superimpose: need " + std::to_string(k) + " successful examples, have " +
        std::to_string(pool.size()));
  }

  const Tensor& s = examples[pool.front()].original;
  const int target = examples[pool.front()].target;
  for (std::size_t idx : pool) {
    if (!examples[idx].original.same_shape(s) ||
        examples[idx].original.data != s.data) {
      throw DataError("superimpose: examples disagree on the original input");
    }
    if (examples[idx].target != target) {
      throw DataError("superimpose: examples disagree on the target");
    }
  }

  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    return examples[a].perturbation < examples[b].perturbation;
  });

  Tensor out = s;
  for (int i = 0; i < k; ++i) {
    const Tensor& delta = examples[pool[static_cast<std::size_t>(i)]].delta;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += delta[j];
  }
  return clip01(std::move(out));
}

std::vector<AdversarialExample> single_network_sweep(
    const Ensemble& ens, const Dataset& samples, const std::vector<int>& targets,
    const AttackConfig& cfg) {
  ens.validate();
  if (samples.size() == 0) throw DataError("sweep: empty sample set");

  struct Triple {
    std::size_t sample;
    int target;
    int member;
  };
  std::vector<Triple> triples;
  for (std::size_t si = 0; si < samples.size(); ++si) {
    for (int t : targets) {
      if (t == samples.labels[si]) continue;
      if (t < 0 || static_cast<std::size_t>(t) >= ens.label_count) {
        throw ConfigError("sweep: target label out of range");
      }
      for (std::size_t l = 0; l < ens.size(); ++l) {
        triples.push_back({si, t, static_cast<int>(l)});
      }
    }
  }

  std::vector<AdversarialExample> out(triples.size());
  parallel_for(triples.size(), [&](std::size_t idx) {
    const Triple& tr = triples[idx];
    AttackConfig local = cfg;
    local.seed = rng::derive(cfg.seed, idx);
    out[idx] = craft(ens.members[static_cast<std::size_t>(tr.member)],
                     samples.inputs[tr.sample], tr.target, local, tr.sample,
                     tr.member);
  });
  return out;
}

std::string example_to_json(const AdversarialExample& ex) {
  json j;
  j["source_index"] = ex.source_index;
  j["target"] = ex.target;
  j["crafted_on"] = ex.crafted_on;
  j["perturbation"] = ex.perturbation;
  j["success"] = ex.success_on_crafted;
  j["shape"] = ex.original.shape;
  j["original"] = ex.original.data;

  std::size_t nonzero = 0;
  for (double v : ex.delta.data) {
    if (v != 0.0) ++nonzero;
  }
  if (nonzero * 10 <= ex.delta.size()) {
    json sparse = json::array();
    for (std::size_t i = 0; i < ex.delta.size(); ++i) {
      if (ex.delta[i] != 0.0) sparse.push_back({i, ex.delta[i]});
    }
    j["delta"] = {{"sparse", std::move(sparse)}};
  } else {
    j["delta"] = {{"dense", ex.delta.data}};
  }
  return j.dump();
}

AdversarialExample example_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("examples: invalid JSON line: ") + e.what());
  }
  try {
    AdversarialExample ex;
    ex.source_index = j.at("source_index").get<std::size_t>();
    ex.target = j.at("target").get<int>();
    ex.crafted_on = j.at("crafted_on").get<int>();
    ex.perturbation = j.at("perturbation").get<double>();
    ex.success_on_crafted = j.at("success").get<bool>();
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    ex.original = Tensor(shape, j.at("original").get<std::vector<double>>());
    ex.delta = Tensor::zeros(shape);
    const json& dj = j.at("delta");
    if (dj.contains("sparse")) {
      for (const json& pair : dj.at("sparse")) {
        ex.delta[pair.at(0).get<std::size_t>()] = pair.at(1).get<double>();
      }
    } else {
      ex.delta.data = dj.at("dense").get<std::vector<double>>();
      if (ex.delta.data.size() != ex.original.size()) {
        throw DataError("examples: dense delta length mismatch");
      }
    }
    Tensor adv = ex.original;
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += ex.delta[i];
    ex.adversarial = clip01(std::move(adv));
    return ex;
  } catch (const json::exception& e) {
    throw DataError(std::string("examples: missing or mistyped field: ") + e.what());
  }
}

void write_examples_jsonl(const std::vector<AdversarialExample>& examples,
                          const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("examples: cannot write " + path);
  for (const AdversarialExample& ex : examples) out << example_to_json(ex) << "\n";
}

std::vector<AdversarialExample> read_examples_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("examples: cannot open " + path);
  std::vector<AdversarialExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(example_from_json(line));
  }
  return out;
}

}  // namespace certvote
