#pragma once

// Run artifacts and the analyses built on them.
//
// runs/<run_id>/
//   config.json                resolved config, seed, config hash
//   rounds.csv                 round,client_id,task,split,metric_name,value
//   ledger.csv                 round,bytes_up,bytes_down
//   final_client<k>.fmtlckpt   one per client
//   report.json                final per-task mean ± std, embedded target metrics, Δ%, bytes

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "fmtl/checkpoint.hpp"
#include "fmtl/config.hpp"
#include "fmtl/error.hpp"
#include "fmtl/evalstat.hpp"
#include "fmtl/fedcore.hpp"
#include "fmtl/synthdata.hpp"

namespace fmtl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Numbers and files

/// Shortest representation that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw IoError("bad number '" + std::string(s) + "'");
  return v;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// ---------------------------------------------------------------------------
// rounds.csv / ledger.csv

inline constexpr const char* kRoundsHeader = "round,client_id,task,split,metric_name,value";

inline std::string rounds_csv(const std::vector<RoundRecord>& records) {
  std::string out = std::string(kRoundsHeader) + "\n";
  for (const auto& r : records) {
    out += std::to_string(r.round) + "," + std::to_string(r.client_id) + "," + r.task + "," + split_char(r.split) +
           "," + r.metric_name + "," + format_real(r.value) + "\n";
  }
  return out;
}

/// Direction follows from the task key ("A.depth_like" → lower is better).
inline bool task_key_lower_is_better(const std::string& key) {
  const auto dot = key.find('.');
  return task_info(parse_task(dot == std::string::npos ? key : key.substr(dot + 1))).lower_is_better;
}

inline std::vector<RoundRecord> read_rounds_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kRoundsHeader) throw IoError(path.string() + ": unexpected header");
  std::vector<RoundRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 6 || (cells[3] != "G" && cells[3] != "P")) throw IoError(path.string() + ": bad row " + line);
    RoundRecord r;
    r.round = static_cast<int>(parse_real(cells[0]));
    r.client_id = static_cast<int>(parse_real(cells[1]));
    r.task = cells[2];
    r.split = cells[3] == "G" ? EvalSplit::G : EvalSplit::P;
    r.metric_name = cells[4];
    r.value = parse_real(cells[5]);
    r.lower_is_better = task_key_lower_is_better(r.task);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string ledger_csv(const CommLedger& ledger) {
  std::string out = "round,bytes_up,bytes_down\n";
  for (const auto& e : ledger.entries()) {
    out += std::to_string(e.round) + "," + std::to_string(e.bytes_up) + "," + std::to_string(e.bytes_down) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// report.json helpers

inline nlohmann::json table_to_json(const TaskTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [task, s] : t) {
    j[task] = {{"metric", s.metric_name},
               {"lower_is_better", s.lower_is_better},
               {"mean", s.stats.mean},
               {"std", s.stats.std}};
  }
  return j;
}

inline TaskTable table_from_json(const nlohmann::json& j) {
  TaskTable t;
  try {
    for (const auto& [task, v] : j.items()) {
      TaskSummary s;
      s.metric_name = v.at("metric").get<std::string>();
      s.lower_is_better = v.at("lower_is_better").get<bool>();
      s.stats.mean = v.at("mean").get<double>();
      s.stats.std = v.value("std", 0.0);
      t.emplace(task, s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed metric table: ") + e.what());
  }
  return t;
}

inline nlohmann::json read_report(const fs::path& run_dir) {
  const auto path = run_dir / "report.json";
  if (!fs::exists(path)) throw ConfigError("no report.json in " + run_dir.string());
  auto j = nlohmann::json::parse(read_text(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError(path.string() + " is not a JSON object");
  return j;
}

inline std::string baseline_label(const nlohmann::json& report) {
  return report.at("strategy_label").get<std::string>() + "-" + report.at("arch").get<std::string>();
}

/// A usable target: a finished run with final metrics. `where` is a run
/// directory or a directory of runs; in the latter case the Local run with
/// the same scenario and seed is chosen (MD preferred).
inline nlohmann::json find_target(const fs::path& where, const std::string& scenario, std::uint64_t seed) {
  auto usable = [](const nlohmann::json& r) {
    return r.value("status", "") == "done" && r.contains("final_metrics") && r["final_metrics"].is_object();
  };
  if (fs::exists(where / "report.json")) {
    auto r = read_report(where);
    if (!usable(r)) throw ConfigError("target " + where.string() + " has no final metrics");
    return r;
  }
  if (!fs::is_directory(where)) throw ConfigError("target " + where.string() + " does not exist");
  std::optional<nlohmann::json> best;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(where)) {
    if (e.is_directory() && fs::exists(e.path() / "report.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    auto r = read_report(d);
    if (!usable(r) || r.value("strategy", "") != "local") continue;
    if (r.value("scenario", "") != scenario || r.value("seed", std::uint64_t{0}) != seed) continue;
    if (!best || (r.value("arch", "") == "MD" && best->value("arch", "") != "MD")) best = r;
  }
  if (!best) {
    throw ConfigError("no Local target for " + scenario + " seed " + std::to_string(seed) + " under " +
                      where.string());
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Running

struct RunOutcome {
  std::string run_id;
  fs::path dir;
  RunStatus status = RunStatus::done;
  nlohmann::json report;
};

inline RunSpec make_run_spec(const ExperimentConfig& c, std::uint64_t seed) {
  RunSpec rs;
  rs.arch = parse_arch(c.arch);
  rs.strategy = parse_strategy(c.strategy, c.decoupled);
  rs.hp = strategy_params(c);
  rs.train = train_config(c);
  rs.seed = seed;
  rs.eval_interval = c.eval_interval;
  rs.parallel_clients = c.parallel_clients;
  if (c.warm_start) rs.warm_start = load_checkpoint(*c.warm_start).params;
  return rs;
}

/// Executes one seed of a resolved config and writes its run directory.
inline RunOutcome execute_run(const ExperimentConfig& c, std::uint64_t seed, const fs::path& out_root) {
  RunOutcome out;
  out.run_id = make_run_id(c, seed);
  out.dir = out_root / out.run_id;

  std::optional<nlohmann::json> target;
  if (c.target) target = find_target(*c.target, c.scenario, seed);

  auto spec = make_run_spec(c, seed);
  const auto data = make_scenario(scenario_spec(c, seed));
  spec.scenario = data.spec;
  const auto result = run_experiment(spec, data);
  out.status = result.status;

  ensure_dir(out.dir);
  auto cfg = to_json(c);
  cfg["seeds"] = {seed};
  const nlohmann::json config_doc = {{"config", cfg},
                                     {"seed", seed},
                                     {"run_id", out.run_id},
                                     {"config_hash", config_hash(c, seed)},
                                     {"canonical", canonical_config(c, seed)}};
  write_text(out.dir / "config.json", config_doc.dump(2) + "\n");
  write_text(out.dir / "rounds.csv", rounds_csv(result.records));
  write_text(out.dir / "ledger.csv", ledger_csv(result.ledger));
  for (std::size_t k = 0; k < result.final_params.size(); ++k) {
    const int id = data.clients[k].provenance.client_id;
    save_checkpoint(out.dir / ("final_client" + std::to_string(id) + ".fmtlckpt"), result.final_params[k],
                    {{"run_id", out.run_id}, {"client_id", id}, {"arch", c.arch}});
  }

  nlohmann::json rep;
  rep["run_id"] = out.run_id;
  rep["status"] = std::string(status_name(result.status));
  rep["scenario"] = c.scenario;
  rep["arch"] = c.arch;
  rep["strategy"] = c.strategy;
  rep["decoupled"] = c.decoupled;
  rep["strategy_label"] = spec.strategy.label();
  rep["seed"] = seed;
  rep["config_hash"] = config_hash(c, seed);
  rep["clients"] = data.clients.size();
  rep["bytes"] = {{"up", result.ledger.total_up()},
                  {"down", result.ledger.total_down()},
                  {"total", result.ledger.total()}};
  if (result.status == RunStatus::null_baseline) {
    rep["null_reason"] = result.null_reason;
    rep["final_metrics"] = nullptr;
    rep["target"] = nullptr;
    rep["delta_G"] = nullptr;
    rep["delta_P"] = nullptr;
  } else {
    const int final_round = result.eval_rounds.back();
    rep["final_round"] = final_round;
    rep["eval_rounds"] = result.eval_rounds;
    const auto g = summarize(result.records, final_round, EvalSplit::G);
    const auto p = summarize(result.records, final_round, EvalSplit::P);
    rep["final_metrics"] = {{"G", table_to_json(g)}, {"P", table_to_json(p)}};
    nlohmann::json tgt;
    if (target) {
      tgt = {{"run_id", (*target)["run_id"]}, {"strategy_label", (*target)["strategy_label"]},
             {"arch", (*target)["arch"]}, {"final_metrics", (*target)["final_metrics"]}};
    } else if (spec.strategy.kind == Strategy::local) {
      tgt = {{"run_id", out.run_id}, {"strategy_label", spec.strategy.label()}, {"arch", c.arch},
             {"final_metrics", rep["final_metrics"]}};
    }
    if (tgt.is_null()) {
      rep["target"] = nullptr;
      rep["delta_G"] = nullptr;
      rep["delta_P"] = nullptr;
    } else {
      rep["target"] = tgt;
      try {
        rep["delta_G"] = table_delta(g, table_from_json(tgt["final_metrics"]["G"]));
        rep["delta_P"] = table_delta(p, table_from_json(tgt["final_metrics"]["P"]));
      } catch (const DomainError& e) {
        // a zero target metric leaves Delta undefined; the run itself stands
        rep["delta_G"] = nullptr;
        rep["delta_P"] = nullptr;
        rep["delta_error"] = e.what();
      }
    }
  }
  write_text(out.dir / "report.json", rep.dump(2) + "\n");
  out.report = std::move(rep);
  return out;
}

/// Recomputes Δ_G/Δ_P of a run from rounds.csv and the target embedded in
/// report.json.
inline std::pair<double, double> recompute_deltas(const fs::path& run_dir) {
  const auto rep = read_report(run_dir);
  if (!rep.contains("target") || rep["target"].is_null()) throw ConfigError(run_dir.string() + ": no target metrics");
  const auto records = read_rounds_csv(run_dir / "rounds.csv");
  const int round = rep.at("final_round").get<int>();
  const auto& t = rep["target"]["final_metrics"];
  return {table_delta(summarize(records, round, EvalSplit::G), table_from_json(t.at("G"))),
          table_delta(summarize(records, round, EvalSplit::P), table_from_json(t.at("P")))};
}

// ---------------------------------------------------------------------------
// report: Δ per run against a Local target, mean ± std across seeds

struct ImprovementRow {
  std::string baseline;
  std::string scenario;
  std::size_t seeds = 0;
  MeanStd delta_g;
  MeanStd delta_p;
  std::map<std::string, MeanStd> task_g;  // final G metric per task across seeds
};

inline std::vector<ImprovementRow> improvement_table(const std::vector<fs::path>& runs,
                                                     const std::optional<fs::path>& target) {
  struct Acc {
    std::string scenario;
    std::vector<double> g, p;
    std::map<std::string, std::vector<double>> task_g;
  };
  std::map<std::string, Acc> acc;
  std::vector<std::string> order;
  for (const auto& dir : runs) {
    const auto rep = read_report(dir);
    if (rep.value("status", "") != "done") continue;
    const auto scenario = rep.at("scenario").get<std::string>();
    const auto seed = rep.at("seed").get<std::uint64_t>();
    TaskTable tg, tp;
    if (target) {
      const auto t = find_target(*target, scenario, seed);
      tg = table_from_json(t["final_metrics"]["G"]);
      tp = table_from_json(t["final_metrics"]["P"]);
    } else if (rep.contains("target") && !rep["target"].is_null()) {
      tg = table_from_json(rep["target"]["final_metrics"]["G"]);
      tp = table_from_json(rep["target"]["final_metrics"]["P"]);
    } else {
      throw ConfigError(dir.string() + ": no target metrics (pass --target)");
    }
    const auto fg = table_from_json(rep["final_metrics"]["G"]);
    const auto fp = table_from_json(rep["final_metrics"]["P"]);
    const auto label = baseline_label(rep);
    if (!acc.count(label)) order.push_back(label);
    auto& a = acc[label];
    a.scenario = scenario;
    a.g.push_back(table_delta(fg, tg));
    a.p.push_back(table_delta(fp, tp));
    for (const auto& [task, s] : fg) a.task_g[task].push_back(s.stats.mean);
  }
  std::vector<ImprovementRow> rows;
  for (const auto& label : order) {
    const auto& a = acc.at(label);
    ImprovementRow r;
    r.baseline = label;
    r.scenario = a.scenario;
    r.seeds = a.g.size();
    r.delta_g = mean_std(a.g);
    r.delta_p = mean_std(a.p);
    for (const auto& [task, v] : a.task_g) r.task_g[task] = mean_std(v);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string improvement_csv(const std::vector<ImprovementRow>& rows) {
  std::set<std::string> tasks;
  for (const auto& r : rows) {
    for (const auto& [t, _] : r.task_g) tasks.insert(t);
  }
  std::string out = "baseline,scenario,seeds,delta_G_mean,delta_G_std,delta_P_mean,delta_P_std";
  for (const auto& t : tasks) out += "," + t + "_G_mean," + t + "_G_std";
  out += "\n";
  for (const auto& r : rows) {
    out += r.baseline + "," + r.scenario + "," + std::to_string(r.seeds) + "," + format_real(r.delta_g.mean) + "," +
           format_real(r.delta_g.std) + "," + format_real(r.delta_p.mean) + "," + format_real(r.delta_p.std);
    for (const auto& t : tasks) {
      auto it = r.task_g.find(t);
      out += it == r.task_g.end() ? ",," : "," + format_real(it->second.mean) + "," + format_real(it->second.std);
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// compare: pairwise Wilcoxon + Bonferroni, Friedman/Nemenyi, Δ curves

inline constexpr const char* kPairingUnit = "per (seed, task) Delta% vs the run's target, G split";

struct CompareOutput {
  std::vector<std::string> baselines;
  std::vector<StatTestResult> tests;
  CDReport cd;
  std::vector<std::string> block_keys;
  std::string curves_csv;
};

inline CompareOutput compare_runs(const std::vector<fs::path>& runs, EvalSplit split = EvalSplit::G) {
  // baseline → block key "(seed)|task" → per-task Δ
  std::map<std::string, std::map<std::string, double>> obs;
  std::vector<std::string> order;
  // curves: baseline → round → seeds' Δ values
  std::map<std::string, std::map<int, std::pair<std::vector<double>, std::vector<double>>>> curve;
  for (const auto& dir : runs) {
    const auto rep = read_report(dir);
    if (rep.value("status", "") != "done") continue;
    if (!rep.contains("target") || rep["target"].is_null()) {
      throw ConfigError(dir.string() + ": no target metrics; run with a target first");
    }
    const auto label = baseline_label(rep);
    if (!obs.count(label)) order.push_back(label);
    const auto seed = rep.at("seed").get<std::uint64_t>();
    const auto tg = table_from_json(rep["target"]["final_metrics"]["G"]);
    const auto tp = table_from_json(rep["target"]["final_metrics"]["P"]);
    const auto fin = table_from_json(rep["final_metrics"][split == EvalSplit::G ? "G" : "P"]);
    const auto& tt = split == EvalSplit::G ? tg : tp;
    for (const auto& [task, s] : fin) {
      auto it = tt.find(task);
      if (it == tt.end()) throw ArgumentError(dir.string() + ": target lacks task " + task);
      const TaskImprovement one{task, s.stats.mean, it->second.stats.mean, s.lower_is_better, 1.0};
      obs[label]["s" + std::to_string(seed) + "|" + task] = delta_percent(std::span<const TaskImprovement>(&one, 1));
    }
    const auto records = read_rounds_csv(dir / "rounds.csv");
    for (int r : rep.at("eval_rounds").get<std::vector<int>>()) {
      auto& cell = curve[label][r];
      cell.first.push_back(table_delta(summarize(records, r, EvalSplit::G), tg));
      cell.second.push_back(table_delta(summarize(records, r, EvalSplit::P), tp));
    }
  }
  if (order.size() < 2) throw ConfigError("compare needs at least two baselines with finished runs");

  CompareOutput out;
  out.baselines = order;
  std::set<std::string> keys;
  for (const auto& [k, _] : obs.at(order.front())) keys.insert(k);
  for (const auto& b : order) {
    std::set<std::string> mine;
    for (const auto& [k, _] : obs.at(b)) {
      if (keys.count(k)) mine.insert(k);
    }
    keys = std::move(mine);
  }
  if (keys.size() < 2) throw ConfigError("baselines share fewer than two (seed, task) blocks");
  out.block_keys.assign(keys.begin(), keys.end());
  std::vector<std::vector<double>> per_baseline;
  for (const auto& b : order) {
    std::vector<double> v;
    for (const auto& k : out.block_keys) v.push_back(obs.at(b).at(k));
    per_baseline.push_back(std::move(v));
  }
  out.tests = pairwise_wilcoxon(order, per_baseline);
  std::vector<std::vector<double>> blocks(out.block_keys.size(), std::vector<double>(order.size()));
  for (std::size_t i = 0; i < out.block_keys.size(); ++i) {
    for (std::size_t b = 0; b < order.size(); ++b) blocks[i][b] = per_baseline[b][i];
  }
  out.cd = friedman_nemenyi(order, blocks, std::vector<bool>(blocks.size(), true));

  out.curves_csv = "round,baseline,delta_G,delta_P\n";
  std::set<int> rounds;
  for (const auto& [_, m] : curve) {
    for (const auto& [r, __] : m) rounds.insert(r);
  }
  for (int r : rounds) {
    for (const auto& b : order) {
      auto it = curve[b].find(r);
      if (it == curve[b].end()) continue;
      out.curves_csv += std::to_string(r) + "," + b + "," + format_real(mean_std(it->second.first).mean) + "," +
                        format_real(mean_std(it->second.second).mean) + "\n";
    }
  }
  return out;
}

inline std::string pvalues_csv(const CompareOutput& c) {
  const std::size_t k = c.baselines.size();
  std::vector<std::vector<double>> m(k, std::vector<double>(k, 1.0));
  auto index = [&](const std::string& n) {
    return static_cast<std::size_t>(std::find(c.baselines.begin(), c.baselines.end(), n) - c.baselines.begin());
  };
  for (const auto& t : c.tests) {
    const auto a = index(t.baseline_a), b = index(t.baseline_b);
    m[a][b] = m[b][a] = t.adjusted_p;
  }
  std::string out = "baseline";
  for (const auto& b : c.baselines) out += "," + b;
  out += "\n";
  for (std::size_t a = 0; a < k; ++a) {
    out += c.baselines[a];
    for (std::size_t b = 0; b < k; ++b) out += "," + format_real(m[a][b]);
    out += "\n";
  }
  return out;
}

inline nlohmann::json cd_json(const CompareOutput& c) {
  const auto& r = c.cd;
  nlohmann::json ranks = nlohmann::json::object();
  for (std::size_t i = 0; i < r.baselines.size(); ++i) ranks[r.baselines[i]] = r.average_ranks[i];
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& t : c.tests) {
    tests.push_back({{"a", t.baseline_a}, {"b", t.baseline_b}, {"raw_p", t.raw_p}, {"adjusted_p", t.adjusted_p},
                     {"statistic", t.statistic}, {"n", t.n}});
  }
  return {{"baselines", r.baselines},   {"average_ranks", ranks},        {"n_blocks", r.n_blocks},
          {"k", r.k},                   {"friedman_chi2", r.friedman_chi2}, {"friedman_p", r.friedman_p},
          {"alpha", r.alpha},           {"cd", r.cd},                    {"cliques", r.cliques},
          {"pairing_unit", kPairingUnit}, {"blocks", c.block_keys},      {"wilcoxon", tests}};
}

// ---------------------------------------------------------------------------
// generate: binary rows of 23 float64 (16 inputs, 7 label slots) + manifest

inline constexpr std::size_t kRowWidth = kInputDim + kLabelWidth;

inline std::string encode_rows(const std::vector<Sample>& samples) {
  std::string out;
  out.reserve(samples.size() * kRowWidth * 8);
  auto put = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  };
  for (const auto& s : samples) {
    for (double v : s.x) put(v);
    for (double v : s.y) put(v);
  }
  return out;
}

inline std::vector<Sample> decode_rows(const std::string& bytes) {
  if (bytes.size() % (kRowWidth * 8) != 0) throw IoError("data file length is not a whole number of rows");
  std::vector<Sample> out(bytes.size() / (kRowWidth * 8));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (auto& s : out) {
    for (std::size_t i = 0; i < kRowWidth; ++i, p += 8) {
      const double v = std::bit_cast<double>(detail::get_u64_le(p));
      (i < kInputDim ? s.x[i] : s.y[i - kInputDim]) = v;
    }
  }
  return out;
}

/// Writes <root>/<scenario>/<seed>/ and returns the manifest. Refuses an
/// existing directory unless `force`.
inline nlohmann::json generate_dataset(const ScenarioSpec& spec, const fs::path& root, bool force) {
  const auto data = make_scenario(spec);
  std::string scen;
  for (char ch : scenario_name(data.spec.scenario_id)) {
    if (ch != '-') scen.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  const auto dir = root / scen / std::to_string(spec.seed);
  if (fs::exists(dir) && !force) throw ConfigError(dir.string() + " already exists (use --force to overwrite)");
  ensure_dir(dir);

  nlohmann::json files = nlohmann::json::object();
  auto emit = [&](const std::string& name, const std::vector<Sample>& rows) {
    const auto bytes = encode_rows(rows);
    write_text(dir / name, bytes);
    files[name] = hex64(fnv1a64(bytes));
    return nlohmann::json{{"file", name}, {"rows", rows.size()}};
  };
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : data.clients) {
    nlohmann::json tasks = nlohmann::json::array();
    for (auto t : c.provenance.tasks) tasks.push_back(std::string(task_name(t)));
    const auto id = std::to_string(c.provenance.client_id);
    clients.push_back({{"client_id", c.provenance.client_id},
                       {"domain", std::string(1, domain_char(c.provenance.domain))},
                       {"tasks", tasks},
                       {"train_count", c.provenance.train_count},
                       {"train", emit("client" + id + "_train.f64", c.train)},
                       {"local_test", emit("client" + id + "_test.f64", c.local_test)}});
  }
  nlohmann::json global = nlohmann::json::object();
  for (const auto& [d, rows] : data.global_test) {
    const std::string dc(1, domain_char(d));
    global[dc] = emit("global_test_" + dc + ".f64", rows);
  }
  nlohmann::json m = {{"format", 1},
                      {"scenario", std::string(scenario_name(data.spec.scenario_id))},
                      {"seed", spec.seed},
                      {"world_seed", spec.world_seed},
                      {"row_layout",
                       {{"float64_per_row", kRowWidth},
                        {"x", kInputDim},
                        {"y", {"depth", "edge", "normal_x", "normal_y", "normal_z", "semseg_class", "parts_class"}}}},
                      {"clients", clients},
                      {"global_test", global},
                      {"files", files}};
  m["manifest_hash"] = hex64(fnv1a64(m.dump()));
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// pretrain: warm-start checkpoint on the disjoint pretrain pool

struct PretrainOptions {
  ArchKind arch = ArchKind::MD;
  std::uint64_t seed = 0;
  int epochs = 10;
  double lr = 1e-3;
  std::size_t count = kDefaultPretrainCount;
  std::uint64_t world_seed = 2024;
};

inline SegmentedParams pretrain_model(const PretrainOptions& o) {
  if (o.epochs < 1) throw ConfigError("pretrain epochs must be >= 1");
  if (!(o.lr > 0.0)) throw ConfigError("pretrain lr must be > 0");
  ScenarioSpec spec;
  spec.seed = o.seed;
  spec.world_seed = o.world_seed;
  const auto pool = pretrain_pool(spec, o.count);
  ClientState c;
  c.client_id = -1;
  c.data = &pool;
  c.arch = o.arch;
  c.tasks.assign(kDomainATasks.begin(), kDomainATasks.end());
  c.q.assign(c.tasks.size(), 1.0 / static_cast<double>(c.tasks.size()));
  c.params = init_params(o.arch, c.tasks, RngStream::for_purpose(o.seed, -1, "pretrain-init"));
  c.optimizer = AdamWState(c.params.size(), AdamWConfig{});
  c.rng = RngStream::for_purpose(o.seed, -1, "pretrain-train");
  c = local_train(std::move(c), o.lr, o.epochs, 8);
  return c.params;
}

// ---------------------------------------------------------------------------
// sweep

enum class SweepAxis { clients, pretrain };

inline SweepAxis parse_axis(std::string_view s) {
  if (s == "clients") return SweepAxis::clients;
  if (s == "pretrain") return SweepAxis::pretrain;
  throw ConfigError("unknown sweep axis '" + std::string(s) + "' (expected clients or pretrain)");
}

struct SweepCell {
  std::string cell;
  ExperimentConfig config;
};

/// clients: IID-1 with 2..8 clients (7 cells). pretrain: for each strategy,
/// one cell from scratch and one warm-started from `checkpoint`.
inline std::vector<SweepCell> expand_sweep(const ExperimentConfig& tmpl, SweepAxis axis,
                                           const std::vector<std::string>& strategies,
                                           const std::string& checkpoint) {
  std::vector<SweepCell> cells;
  if (axis == SweepAxis::clients) {
    for (int k = 2; k <= 8; ++k) {
      auto c = tmpl;
      c.scenario = "IID-1";
      c.client_count = k;
      cells.push_back({"clients=" + std::to_string(k), resolve_config(c)});
    }
  } else {
    const auto list = strategies.empty() ? std::vector<std::string>{tmpl.strategy} : strategies;
    for (const auto& s : list) {
      for (bool warm : {false, true}) {
        auto c = tmpl;
        c.strategy = s;
        c.decoupled = false;
        c.warm_start = warm ? std::optional<std::string>(checkpoint) : std::nullopt;
        auto r = resolve_config(c);
        cells.push_back({r.strategy + (warm ? "/pretrained" : "/scratch"), r});
      }
    }
  }
  return cells;
}

}  // namespace fmtl
