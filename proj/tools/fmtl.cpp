// fmtl: command-line front end for the federated multi-task simulator.
//
// Exit codes: 0 ok, 2 configuration error, 3 I/O error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fmtl/checkpoint.hpp"
#include "fmtl/config.hpp"
#include "fmtl/runio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

// Flags shared by run and sweep; only the ones given end up as overrides.
struct RunFlags {
  std::optional<std::string> config;
  std::optional<std::string> scenario, arch, strategy, target, warm_start;
  std::optional<bool> decoupled, parallel;
  std::optional<std::string> seeds;
  std::optional<int> rounds, local_epochs, eval_interval;
  std::optional<double> base_lr;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON config file");
    app->add_option("--scenario", scenario, "IID-1 .. NIID-7");
    app->add_option("--arch", arch, "MD or TC");
    app->add_option("--strategy", strategy, "local, fedavg, fedprox, fedamp, fedrep, matfl, fedmtl, pcgrad, cagrad");
    app->add_flag("--decoupled", decoupled, "encoder-only (-E) variant");
    app->add_option("--seeds", seeds, "comma-separated seeds");
    app->add_option("--rounds", rounds);
    app->add_option("--local-epochs", local_epochs);
    app->add_option("--eval-interval", eval_interval);
    app->add_option("--base-lr", base_lr);
    app->add_option("--target", target, "Local run directory, or a directory of runs");
    app->add_option("--warm-start", warm_start, ".fmtlckpt checkpoint");
    app->add_flag("--parallel", parallel, "train clients on threads (results unchanged)");
  }

  json overrides() const {
    json j = json::object();
    if (scenario) j["scenario"] = *scenario;
    if (arch) j["arch"] = *arch;
    if (strategy) j["strategy"] = *strategy;
    if (decoupled) j["decoupled"] = *decoupled;
    if (seeds) j["seeds"] = fmtl::detail::env_value("seeds", *seeds);
    if (rounds) j["rounds"] = *rounds;
    if (local_epochs) j["local_epochs"] = *local_epochs;
    if (eval_interval) j["eval_interval"] = *eval_interval;
    if (base_lr) j["base_lr"] = *base_lr;
    if (target) j["target"] = *target;
    if (warm_start) j["warm_start"] = *warm_start;
    if (parallel) j["parallel_clients"] = *parallel;
    return j;
  }

  fmtl::ExperimentConfig load() const {
    std::optional<fs::path> path;
    if (config) path = *config;
    return fmtl::load_config(path, overrides());
  }
};

/// Run directories among `inputs`; a directory without report.json is
/// expanded to its immediate subdirectories that have one.
std::vector<fs::path> collect_runs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::exists(p / "report.json")) {
      out.push_back(p);
      continue;
    }
    if (!fs::is_directory(p)) throw fmtl::IoError("no such run directory: " + in);
    std::vector<fs::path> sub;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_directory() && fs::exists(e.path() / "report.json")) sub.push_back(e.path());
    }
    std::sort(sub.begin(), sub.end());
    out.insert(out.end(), sub.begin(), sub.end());
  }
  if (out.empty()) throw fmtl::ConfigError("no run directories found");
  return out;
}

int cmd_generate(const std::string& scenario, std::uint64_t seed, std::optional<int> clients,
                 std::uint64_t world_seed, const std::string& out, bool force) {
  fmtl::ScenarioSpec spec;
  spec.scenario_id = fmtl::parse_scenario(scenario);
  spec.seed = seed;
  spec.world_seed = world_seed;
  if (clients) {
    if (spec.scenario_id != fmtl::ScenarioId::IID1 || *clients < 2 || *clients > 8) {
      throw fmtl::ConfigError("--clients applies to IID-1 only and must be in 2..8");
    }
    spec.client_count = clients;
  }
  const auto m = fmtl::generate_dataset(spec, out, force);
  std::cout << "wrote " << m["clients"].size() << " clients, manifest_hash " << m["manifest_hash"].get<std::string>()
            << "\n";
  return 0;
}

int cmd_run(const RunFlags& flags, const std::string& out) {
  const auto cfg = flags.load();
  for (auto seed : cfg.seeds) {
    const auto r = fmtl::execute_run(cfg, seed, out);
    std::cout << r.run_id << " " << fmtl::status_name(r.status);
    if (r.status == fmtl::RunStatus::done && !r.report["delta_G"].is_null()) {
      std::cout << " delta_G=" << fmtl::format_real(r.report["delta_G"].get<double>())
                << " delta_P=" << fmtl::format_real(r.report["delta_P"].get<double>());
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::optional<std::string>& target,
               const std::optional<std::string>& out) {
  std::optional<fs::path> t;
  if (target) t = *target;
  const auto rows = fmtl::improvement_table(collect_runs(inputs), t);
  if (rows.empty()) throw fmtl::ConfigError("no finished runs to report");
  const auto csv = fmtl::improvement_csv(rows);
  if (out) {
    fmtl::write_text(*out, csv);
  }
  for (const auto& r : rows) {
    std::cout << r.baseline << " (" << r.scenario << ", " << r.seeds << " seeds)  dG% = " << r.delta_g.mean << " ± "
              << r.delta_g.std << "  dP% = " << r.delta_p.mean << " ± " << r.delta_p.std << "\n";
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& inputs, const std::string& out, const std::string& split) {
  if (split != "G" && split != "P") throw fmtl::ConfigError("--split must be G or P");
  const auto res = fmtl::compare_runs(collect_runs(inputs), split == "G" ? fmtl::EvalSplit::G : fmtl::EvalSplit::P);
  fmtl::ensure_dir(out);
  fmtl::write_text(fs::path(out) / "pvalues.csv", fmtl::pvalues_csv(res));
  fmtl::write_text(fs::path(out) / "cd.json", fmtl::cd_json(res).dump(2) + "\n");
  fmtl::write_text(fs::path(out) / "curves.csv", res.curves_csv);
  std::cout << "k=" << res.cd.k << " N=" << res.cd.n_blocks << " chi2=" << res.cd.friedman_chi2
            << " p=" << res.cd.friedman_p << " CD=" << res.cd.cd << "\n";
  for (std::size_t i = 0; i < res.cd.baselines.size(); ++i) {
    std::cout << "  " << res.cd.baselines[i] << " avg rank " << res.cd.average_ranks[i] << "\n";
  }
  return 0;
}

fmtl::PretrainOptions pretrain_options(const std::string& arch, std::uint64_t seed, int epochs, double lr,
                                       std::size_t count) {
  fmtl::PretrainOptions o;
  o.arch = fmtl::parse_arch(arch);
  o.seed = seed;
  o.epochs = epochs;
  o.lr = lr;
  o.count = count;
  return o;
}

int cmd_pretrain(const fmtl::PretrainOptions& o, const std::string& out) {
  const auto params = fmtl::pretrain_model(o);
  fmtl::save_checkpoint(out, params,
                        {{"arch", std::string(fmtl::arch_name(o.arch))},
                         {"seed", o.seed},
                         {"epochs", o.epochs},
                         {"lr", o.lr},
                         {"count", o.count},
                         {"source", "pretrain_pool"}});
  std::cout << "wrote " << out << " (" << params.size() << " parameters)\n";
  return 0;
}

int cmd_sweep(const RunFlags& flags, const std::string& axis_name, const std::vector<std::string>& strategies,
              std::optional<std::string> checkpoint, const std::string& out) {
  const auto tmpl = flags.load();
  const auto axis = fmtl::parse_axis(axis_name);
  fmtl::ensure_dir(out);
  if (axis == fmtl::SweepAxis::pretrain && !checkpoint) {
    const fs::path ckpt = fs::path(out) / ("pretrain_" + tmpl.arch + ".fmtlckpt");
    fmtl::PretrainOptions o;
    o.arch = fmtl::parse_arch(tmpl.arch);
    o.seed = tmpl.seeds.front();
    o.world_seed = tmpl.world_seed;
    fmtl::save_checkpoint(ckpt, fmtl::pretrain_model(o), {{"arch", tmpl.arch}, {"source", "pretrain_pool"}});
    checkpoint = ckpt.string();
  }
  const auto cells = fmtl::expand_sweep(tmpl, axis, strategies, checkpoint.value_or(""));
  const fs::path runs_dir = fs::path(out) / "runs";
  json manifest = {{"axis", axis_name}, {"runs", json::array()}};
  std::string table = "cell,run_id,status,delta_G,delta_P";
  std::vector<std::string> task_cols;
  std::vector<std::string> lines;
  for (const auto& cell : cells) {
    for (auto seed : cell.config.seeds) {
      json entry = {{"cell", cell.cell}, {"config", fmtl::to_json(cell.config)}, {"seed", seed}};
      std::string run_id;
      std::string status = "failed";
      json rep;
      try {
        run_id = fmtl::make_run_id(cell.config, seed);
        const auto r = fmtl::execute_run(cell.config, seed, runs_dir);
        status = std::string(fmtl::status_name(r.status));
        rep = r.report;
      } catch (const std::exception& e) {
        entry["error"] = e.what();
        std::cerr << cell.cell << " seed " << seed << " failed: " << e.what() << "\n";
      }
      entry["run_id"] = run_id;
      entry["status"] = status;
      manifest["runs"].push_back(entry);
      std::string line = cell.cell + "," + run_id + "," + status;
      for (const char* key : {"delta_G", "delta_P"}) {
        line += ",";
        if (rep.is_object() && rep.contains(key) && rep[key].is_number()) line += fmtl::format_real(rep[key]);
      }
      if (rep.is_object() && rep.contains("final_metrics") && rep["final_metrics"].is_object()) {
        for (const auto& [task, v] : rep["final_metrics"]["G"].items()) {
          if (std::find(task_cols.begin(), task_cols.end(), task) == task_cols.end()) task_cols.push_back(task);
        }
      }
      lines.push_back(line);
      // task means appended after all cells are known
      manifest["runs"].back()["final_G"] =
          rep.is_object() && rep.contains("final_metrics") ? rep["final_metrics"].value("G", json(nullptr)) : json(nullptr);
      std::cout << cell.cell << " seed " << seed << " " << status << "\n";
    }
  }
  for (const auto& t : task_cols) table += "," + t + "_G";
  table += "\n";
  for (std::size_t i = 0; i < lines.size(); ++i) {
    table += lines[i];
    const auto& g = manifest["runs"][i]["final_G"];
    for (const auto& t : task_cols) {
      table += ",";
      if (g.is_object() && g.contains(t)) table += fmtl::format_real(g[t]["mean"].get<double>());
    }
    table += "\n";
  }
  fmtl::write_text(fs::path(out) / "manifest.json", manifest.dump(2) + "\n");
  fmtl::write_text(fs::path(out) / "sweep.csv", table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated multi-task learning simulator"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "materialize a scenario's datasets");
  std::string gen_scenario, gen_out = "data";
  std::uint64_t gen_seed = 0, gen_world = 2024;
  std::optional<int> gen_clients;
  bool gen_force = false;
  gen->add_option("--scenario", gen_scenario)->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--world-seed", gen_world);
  gen->add_option("--clients", gen_clients, "IID-1 client count (2..8)");
  gen->add_option("--out", gen_out, "root directory");
  gen->add_flag("--force", gen_force, "overwrite an existing dataset directory");

  auto* run = app.add_subcommand("run", "run an experiment (one run per seed)");
  RunFlags run_flags;
  run_flags.attach(run);
  std::string run_out = "runs";
  run->add_option("--out", run_out, "runs root directory");

  auto* rep = app.add_subcommand("report", "Delta% tables against a Local target");
  std::vector<std::string> rep_inputs;
  std::optional<std::string> rep_target, rep_out;
  rep->add_option("runs", rep_inputs, "run directories or roots")->required();
  rep->add_option("--target", rep_target, "Local run directory or directory of runs");
  rep->add_option("--out", rep_out, "CSV output path");

  auto* cmp = app.add_subcommand("compare", "Wilcoxon, Friedman/Nemenyi and curves across baselines");
  std::vector<std::string> cmp_inputs;
  std::string cmp_out = "compare", cmp_split = "G";
  cmp->add_option("runs", cmp_inputs, "run directories or roots")->required();
  cmp->add_option("--out", cmp_out, "output directory");
  cmp->add_option("--split", cmp_split, "G or P");

  auto* sw = app.add_subcommand("sweep", "client-count or pretrain sweep");
  RunFlags sw_flags;
  sw_flags.attach(sw);
  std::string sw_axis, sw_out = "sweep";
  std::vector<std::string> sw_strategies;
  std::optional<std::string> sw_ckpt;
  sw->add_option("--axis", sw_axis, "clients or pretrain")->required();
  sw->add_option("--strategies", sw_strategies, "strategies for the pretrain axis")->delimiter(',');
  sw->add_option("--checkpoint", sw_ckpt, "warm-start checkpoint (pretrain axis; trained if absent)");
  sw->add_option("--out", sw_out, "output directory");

  auto* pre = app.add_subcommand("pretrain", "train a warm-start checkpoint on the pretrain pool");
  std::string pre_arch = "MD", pre_out;
  std::uint64_t pre_seed = 0;
  int pre_epochs = 10;
  double pre_lr = 1e-3;
  std::size_t pre_count = fmtl::kDefaultPretrainCount;
  pre->add_option("--arch", pre_arch);
  pre->add_option("--seed", pre_seed);
  pre->add_option("--epochs", pre_epochs);
  pre->add_option("--lr", pre_lr);
  pre->add_option("--count", pre_count);
  pre->add_option("--out", pre_out, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_scenario, gen_seed, gen_clients, gen_world, gen_out, gen_force);
    if (*run) return cmd_run(run_flags, run_out);
    if (*rep) return cmd_report(rep_inputs, rep_target, rep_out);
    if (*cmp) return cmd_compare(cmp_inputs, cmp_out, cmp_split);
    if (*sw) return cmd_sweep(sw_flags, sw_axis, sw_strategies, sw_ckpt, sw_out);
    if (*pre) return cmd_pretrain(pretrain_options(pre_arch, pre_seed, pre_epochs, pre_lr, pre_count), pre_out);
  } catch (const fmtl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fmtl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
