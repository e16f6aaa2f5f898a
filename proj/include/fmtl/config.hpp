#pragma once

// Experiment configuration: a flat JSON object. Unknown keys are rejected;
// every key can be overridden from the environment as FMTL_<KEY> (upper
// case), e.g. FMTL_ROUNDS=20 or FMTL_SEEDS=0,1,2.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmtl/error.hpp"
#include "fmtl/fedcore.hpp"
#include "fmtl/rng.hpp"
#include "fmtl/synthdata.hpp"

namespace fmtl {

struct ExperimentConfig {
  std::string scenario = "IID-1";
  std::string arch = "MD";
  std::string strategy = "fedavg";
  bool decoupled = false;
  std::vector<std::uint64_t> seeds = {0};
  int rounds = 100;
  std::optional<int> local_epochs;  // unset: 4 without domain B, 1 with it
  int batch_size = 8;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int warmup = 5;
  int eval_interval = 2;
  double prox_mu = 0.01;
  double amp_alpha = 0.1;
  double amp_sigma = 1.0;
  double amp_lambda = 1.0;
  double matfl_tau = 1.0;
  double matfl_sigma = 1.0;
  double mtl_lambda = 0.1;
  double cagrad_c = 0.5;
  int cagrad_iterations = 50;
  double cagrad_step = 0.1;
  std::optional<int> client_count;
  double unbalance_ratio = 2.0;
  std::uint64_t pool_a = 2000;
  std::uint64_t test_a = 800;
  std::uint64_t pool_b = 4000;
  std::uint64_t test_b = 1000;
  std::uint64_t world_seed = 2024;
  double regression_sigma = 0.1;
  double label_flip = 0.02;
  std::optional<std::string> warm_start;
  std::optional<std::string> target;
  bool parallel_clients = false;  // never changes results, so not hashed
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "scenario",     "arch",          "strategy",     "decoupled",         "seeds",       "rounds",
      "local_epochs", "batch_size",    "base_lr",      "weight_decay",      "beta1",       "beta2",
      "epsilon",      "warmup",        "eval_interval", "prox_mu",          "amp_alpha",   "amp_sigma",
      "amp_lambda",   "matfl_tau",     "matfl_sigma",  "mtl_lambda",        "cagrad_c",    "cagrad_iterations",
      "cagrad_step",  "client_count",  "unbalance_ratio", "pool_a",         "test_a",      "pool_b",
      "test_b",       "world_seed",    "regression_sigma", "label_flip",    "warm_start",  "target",
      "parallel_clients"};
  return keys;
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type: " + j.at(key).dump());
  }
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read_key(j, key, v);
  out = v;
}

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

/// Environment strings: JSON if they parse, a comma list for seeds, a bare
/// string otherwise.
inline nlohmann::json env_value(const std::string& key, const std::string& text) {
  if (key == "seeds" && !text.empty() && text.front() != '[') {
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        arr.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw ConfigError("FMTL_SEEDS: '" + item + "' is not an unsigned integer");
      }
    }
    return arr;
  }
  auto parsed = nlohmann::json::parse(text, nullptr, false);
  if (!parsed.is_discarded()) return parsed;
  return text;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["scenario"] = c.scenario;
  j["arch"] = c.arch;
  j["strategy"] = c.strategy;
  j["decoupled"] = c.decoupled;
  j["seeds"] = c.seeds;
  j["rounds"] = c.rounds;
  j["local_epochs"] = detail::optional_json(c.local_epochs);
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["warmup"] = c.warmup;
  j["eval_interval"] = c.eval_interval;
  j["prox_mu"] = c.prox_mu;
  j["amp_alpha"] = c.amp_alpha;
  j["amp_sigma"] = c.amp_sigma;
  j["amp_lambda"] = c.amp_lambda;
  j["matfl_tau"] = c.matfl_tau;
  j["matfl_sigma"] = c.matfl_sigma;
  j["mtl_lambda"] = c.mtl_lambda;
  j["cagrad_c"] = c.cagrad_c;
  j["cagrad_iterations"] = c.cagrad_iterations;
  j["cagrad_step"] = c.cagrad_step;
  j["client_count"] = detail::optional_json(c.client_count);
  j["unbalance_ratio"] = c.unbalance_ratio;
  j["pool_a"] = c.pool_a;
  j["test_a"] = c.test_a;
  j["pool_b"] = c.pool_b;
  j["test_b"] = c.test_b;
  j["world_seed"] = c.world_seed;
  j["regression_sigma"] = c.regression_sigma;
  j["label_flip"] = c.label_flip;
  j["warm_start"] = detail::optional_json(c.warm_start);
  j["target"] = detail::optional_json(c.target);
  j["parallel_clients"] = c.parallel_clients;
  return j;
}

/// Parses and validates. Throws ConfigError on unknown keys, wrong types or
/// out-of-range values.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& keys = config_keys();
  for (const auto& [k, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  detail::read_key(j, "scenario", c.scenario);
  detail::read_key(j, "arch", c.arch);
  detail::read_key(j, "strategy", c.strategy);
  detail::read_key(j, "decoupled", c.decoupled);
  detail::read_key(j, "seeds", c.seeds);
  detail::read_key(j, "rounds", c.rounds);
  detail::read_optional(j, "local_epochs", c.local_epochs);
  detail::read_key(j, "batch_size", c.batch_size);
  detail::read_key(j, "base_lr", c.base_lr);
  detail::read_key(j, "weight_decay", c.weight_decay);
  detail::read_key(j, "beta1", c.beta1);
  detail::read_key(j, "beta2", c.beta2);
  detail::read_key(j, "epsilon", c.epsilon);
  detail::read_key(j, "warmup", c.warmup);
  detail::read_key(j, "eval_interval", c.eval_interval);
  detail::read_key(j, "prox_mu", c.prox_mu);
  detail::read_key(j, "amp_alpha", c.amp_alpha);
  detail::read_key(j, "amp_sigma", c.amp_sigma);
  detail::read_key(j, "amp_lambda", c.amp_lambda);
  detail::read_key(j, "matfl_tau", c.matfl_tau);
  detail::read_key(j, "matfl_sigma", c.matfl_sigma);
  detail::read_key(j, "mtl_lambda", c.mtl_lambda);
  detail::read_key(j, "cagrad_c", c.cagrad_c);
  detail::read_key(j, "cagrad_iterations", c.cagrad_iterations);
  detail::read_key(j, "cagrad_step", c.cagrad_step);
  detail::read_optional(j, "client_count", c.client_count);
  detail::read_key(j, "unbalance_ratio", c.unbalance_ratio);
  detail::read_key(j, "pool_a", c.pool_a);
  detail::read_key(j, "test_a", c.test_a);
  detail::read_key(j, "pool_b", c.pool_b);
  detail::read_key(j, "test_b", c.test_b);
  detail::read_key(j, "world_seed", c.world_seed);
  detail::read_key(j, "regression_sigma", c.regression_sigma);
  detail::read_key(j, "label_flip", c.label_flip);
  detail::read_optional(j, "warm_start", c.warm_start);
  detail::read_optional(j, "target", c.target);
  detail::read_key(j, "parallel_clients", c.parallel_clients);
  return c;
}

/// Overlays FMTL_<KEY> environment variables onto `j`.
inline nlohmann::json apply_env_overrides(nlohmann::json j) {
  if (j.is_null()) j = nlohmann::json::object();
  for (const auto& key : config_keys()) {
    const std::string var = "FMTL_" + detail::upper(key);
    if (const char* v = std::getenv(var.c_str())) j[key] = detail::env_value(key, v);
  }
  return j;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + " is not valid JSON");
  return j;
}

/// Resolves defaults that depend on the scenario and checks every value.
inline ExperimentConfig resolve_config(ExperimentConfig c) {
  const auto sid = parse_scenario(c.scenario);
  c.scenario = std::string(scenario_name(sid));
  c.arch = std::string(arch_name(parse_arch(c.arch)));
  const auto sid_strategy = parse_strategy(c.strategy, c.decoupled);
  c.strategy = sid_strategy.key();
  c.decoupled = sid_strategy.decoupled;
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.seeds.empty()) fail("seeds must not be empty");
  if (c.rounds < 1) fail("rounds must be >= 1");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (!(c.base_lr > 0.0)) fail("base_lr must be > 0");
  if (c.weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(c.epsilon > 0.0)) fail("epsilon must be > 0");
  if (c.warmup < 0) fail("warmup must be >= 0");
  if (c.eval_interval < 1) fail("eval_interval must be >= 1");
  if (c.prox_mu < 0.0 || c.amp_alpha < 0.0 || c.amp_lambda < 0.0 || c.mtl_lambda < 0.0 || c.cagrad_c < 0.0) {
    fail("strategy strengths must be >= 0");
  }
  if (!(c.amp_sigma > 0.0) || !(c.matfl_sigma > 0.0) || !(c.matfl_tau > 0.0)) fail("sigma/tau must be > 0");
  if (c.cagrad_iterations < 0 || !(c.cagrad_step > 0.0)) fail("cagrad solver settings out of range");
  if (!(c.unbalance_ratio > 0.0)) fail("unbalance_ratio must be > 0");
  if (c.pool_a < 10 || c.test_a < 1 || c.pool_b < 10 || c.test_b < 1) fail("pool/test sizes too small");
  if (c.regression_sigma < 0.0 || c.label_flip < 0.0 || c.label_flip > 1.0) fail("noise settings out of range");
  if (c.client_count) {
    if (sid != ScenarioId::IID1) fail("client_count applies to IID-1 only");
    if (*c.client_count < 2 || *c.client_count > 8) fail("client_count must be in 2..8");
  }
  const bool has_b = sid == ScenarioId::NIID6 || sid == ScenarioId::NIID7;
  if (!c.local_epochs) c.local_epochs = has_b ? 1 : 4;
  if (*c.local_epochs < 1) fail("local_epochs must be >= 1");
  return c;
}

/// File (optional) → environment → resolution.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                                    const nlohmann::json& flag_overrides = nlohmann::json::object()) {
  nlohmann::json j = path ? read_json_file(*path) : nlohmann::json::object();
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  j = apply_env_overrides(std::move(j));
  for (const auto& [k, v] : flag_overrides.items()) j[k] = v;
  return resolve_config(config_from_json(j));
}

/// Canonical single-seed form used for hashing (sorted keys, compact).
inline std::string canonical_config(const ExperimentConfig& c, std::uint64_t seed) {
  auto j = to_json(c);
  j.erase("seeds");
  j.erase("parallel_clients");
  j["seed"] = seed;
  return j.dump();
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return s;
}

inline std::string config_hash(const ExperimentConfig& c, std::uint64_t seed) {
  return hex64(fnv1a64(canonical_config(c, seed)));
}

/// "<scenario>_<strategy>_<arch>_s<seed>_<hash8>", e.g. niid6_fedavg-e_md_s0_1a2b3c4d.
inline std::string make_run_id(const ExperimentConfig& c, std::uint64_t seed) {
  std::string scen;
  for (char ch : c.scenario) {
    if (ch != '-') scen.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  const auto sid = parse_strategy(c.strategy, c.decoupled);
  std::string strat = sid.key();
  if (sid.decoupled && sid.kind != Strategy::matfl && sid.kind != Strategy::fedrep) strat += "-e";
  std::string arch = c.arch == "MD" ? "md" : "tc";
  return scen + "_" + strat + "_" + arch + "_s" + std::to_string(seed) + "_" + config_hash(c, seed).substr(0, 8);
}

inline ScenarioSpec scenario_spec(const ExperimentConfig& c, std::uint64_t seed) {
  ScenarioSpec s;
  s.scenario_id = parse_scenario(c.scenario);
  s.seed = seed;
  s.world_seed = c.world_seed;
  s.pool_a = c.pool_a;
  s.test_a = c.test_a;
  s.pool_b = c.pool_b;
  s.test_b = c.test_b;
  s.unbalance_ratio = c.unbalance_ratio;
  s.client_count = c.client_count;
  s.noise.regression_sigma = c.regression_sigma;
  s.noise.label_flip = c.label_flip;
  return s;
}

inline StrategyParams strategy_params(const ExperimentConfig& c) {
  StrategyParams p;
  p.prox_mu = c.prox_mu;
  p.amp_alpha = c.amp_alpha;
  p.amp_sigma = c.amp_sigma;
  p.amp_lambda = c.amp_lambda;
  p.matfl_tau = c.matfl_tau;
  p.matfl_sigma = c.matfl_sigma;
  p.mtl_lambda = c.mtl_lambda;
  p.cagrad.c = c.cagrad_c;
  p.cagrad.iterations = c.cagrad_iterations;
  p.cagrad.step = c.cagrad_step;
  return p;
}

inline TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.rounds = c.rounds;
  t.local_epochs = c.local_epochs.value_or(4);
  t.batch_size = static_cast<std::size_t>(c.batch_size);
  t.base_lr = c.base_lr;
  t.warmup_rounds = c.warmup;
  t.adamw.beta1 = c.beta1;
  t.adamw.beta2 = c.beta2;
  t.adamw.epsilon = c.epsilon;
  t.adamw.weight_decay = c.weight_decay;
  return t;
}

}  // namespace fmtl
