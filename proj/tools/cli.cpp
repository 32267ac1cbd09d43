#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <thread>

#include "CLI11.hpp"
#include "app_config.hpp"

namespace qkd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// I/O and training failures: exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> seeds;
  std::optional<std::string> out_dir;
  std::optional<std::string> protocol;
  std::optional<std::string> scenario;
  std::optional<int> blocks;
  std::optional<std::string> tcn_path;
  std::optional<std::string> ppo_path;
  std::vector<std::string> controllers;
  std::string train_what;
  bool toy = false;
};

std::string full_precision(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

AppConfig resolve_config(const Flags& f) {
  AppConfig base = f.config_path.empty() ? AppConfig{} : load_app_config(f.config_path);
  json doc = to_json(base);
  for (const auto& s : f.sets) apply_override(doc, s);
  AppConfig c = app_config_from_json(doc);
  if (f.protocol) c.protocol = *f.protocol;
  if (f.scenario) c.scenario = *f.scenario;
  if (f.blocks) c.blocks = *f.blocks;
  if (f.seed) c.seed = *f.seed;
  if (f.seeds) c.seeds = parse_seeds(*f.seeds);
  if (!f.controllers.empty()) c.controllers = f.controllers;
  c.validate();
  if (c.scenario == "explicit")
    throw UsageError("scenario 'explicit' needs a depolarizing series and is not available here");
  return c;
}

fs::path output_dir(const Flags& f) {
  const fs::path dir = f.out_dir.value_or(".");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("output directory not writable: " + dir.string());
  return dir;
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body, std::ostream& log) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  body(os);
  os.flush();
  if (!os) throw RuntimeFailure("write failed: " + path.string());
  log << "wrote " << path.string() << '\n';
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("missing checkpoint " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw RuntimeFailure("checkpoint " + path + ": " + e.what());
  }
}

Tcn load_tcn(const std::string& path) {
  const json doc = read_json_file(path);
  try {
    return Tcn::from_json(doc);
  } catch (const std::exception& e) {
    throw RuntimeFailure("checkpoint " + path + ": " + e.what());
  }
}

PpoAgent load_agent(const std::string& path) {
  const json doc = read_json_file(path);
  try {
    return PpoAgent::from_json(doc);
  } catch (const std::exception& e) {
    throw RuntimeFailure("checkpoint " + path + ": " + e.what());
  }
}

// ---- commands ---------------------------------------------------------------

void cmd_rates(const Flags& f, std::ostream& out) {
  const AppConfig c = resolve_config(f);
  const ProtocolConfig& proto = c.active_protocol();
  auto body = [&](std::ostream& os) {
    os << kRatesCsvHeader << '\n';
    const int n = static_cast<int>(std::floor((c.rates.d_max - c.rates.d_min) / c.rates.d_step + 1e-9)) + 1;
    for (int i = 0; i < n; ++i) {
      LinkParams link = c.link;
      link.distance_km = c.rates.d_min + i * c.rates.d_step;
      const ProtocolModel m = evaluate_protocol(link, proto);
      os << format_sig10(link.distance_km) << ',' << format_sig10(m.q_mu) << ',' << format_sig10(m.e_mu) << ','
         << format_sig10(m.report.r_per_pulse) << ',' << format_sig10(m.report.r_finite) << ','
         << format_sig10(m.report.r_bps) << '\n';
    }
  };
  if (f.out_dir)
    write_file(output_dir(f) / ("rates_" + c.protocol + ".csv"), body, out);
  else
    body(out);
}

void cmd_simulate(const Flags& f, std::ostream& out) {
  const AppConfig c = resolve_config(f);
  const fs::path dir = output_dir(f);
  const ProtocolConfig& proto = c.active_protocol();
  const NoiseSchedule sched = make_scenario({c.scenario, c.blocks, c.seed, {}});
  const ControlState nominal = ControlState::nominal(proto);
  for (const auto s : c.seeds) {
    ChannelSimulator sim(c.link, sched, proto, s, c.loop.sim);
    std::vector<Telemetry> rows;
    rows.reserve(static_cast<std::size_t>(c.blocks));
    while (!sim.done()) rows.push_back(sim.step(nominal));
    const auto name = "telemetry_" + c.protocol + "_" + c.scenario + "_seed" + std::to_string(s) + ".csv";
    write_file(dir / name, [&](std::ostream& os) { write_telemetry_csv(os, rows); }, out);
  }
}

void write_tcn(const fs::path& dir, Tcn& tcn, const TcnTrainReport& rep, std::ostream& out) {
  write_file(dir / "tcn.json", [&](std::ostream& os) { os << tcn.to_json().dump() << '\n'; }, out);
  write_file(dir / "tcn_loss.csv",
             [&](std::ostream& os) {
               os << kTcnLossCsvHeader << '\n';
               for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
                 os << e + 1 << ',' << full_precision(rep.epoch_loss[e]) << '\n';
             },
             out);
  write_file(dir / "tcn_eval.csv",
             [&](std::ostream& os) {
               os << kTcnEvalCsvHeader << '\n'
                  << full_precision(rep.initial_loss) << ',' << full_precision(rep.final_loss) << '\n';
             },
             out);
}

void cmd_train(const Flags& f, std::ostream& out) {
  const AppConfig c = resolve_config(f);
  const fs::path dir = output_dir(f);
  const ProtocolConfig& proto = c.active_protocol();

  if (f.train_what == "tcn") {
    TcnTrainReport rep;
    Tcn tcn = train_forecaster(c.link, proto, c.tcn, c.loop, c.train, c.seed, &rep);
    write_tcn(dir, tcn, rep, out);
    out << "final_loss " << full_precision(rep.final_loss) << '\n';
    return;
  }

  auto write_history = [&](const std::vector<PpoReport>& h) {
    write_file(dir / "ppo_loss.csv",
               [&](std::ostream& os) {
                 os << kPpoCsvHeader << '\n';
                 for (const auto& r : h) write_ppo_row(os, r);
               },
               out);
  };

  if (f.toy) {
    const ToyRun run = train_toy(c.seed);
    write_history(run.history);
    out << "final_action " << full_precision(run.final_action) << " updates_to_converge "
        << run.updates_to_converge << '\n';
    return;
  }

  std::optional<Tcn> tcn;
  if (f.tcn_path) {
    tcn = load_tcn(*f.tcn_path);
  } else {
    TcnTrainReport rep;
    tcn = train_forecaster(c.link, proto, c.tcn, c.loop, c.train, c.seed, &rep);
    write_tcn(dir, *tcn, rep, out);
  }
  std::vector<PpoReport> history;
  PpoAgent agent = train_policy(c.link, proto, *tcn, c.ppo, c.loop, c.train, c.seed, &history);
  write_history(history);
  const auto aborted = std::count_if(history.begin(), history.end(), [](const PpoReport& r) { return r.aborted; });
  if (!history.empty() && 2 * aborted > static_cast<std::ptrdiff_t>(history.size()))
    throw DivergenceError("ppo: " + std::to_string(aborted) + " of " + std::to_string(history.size()) +
                          " updates hit a non-finite loss");
  write_file(dir / "ppo.json", [&](std::ostream& os) { os << agent.to_json().dump() << '\n'; }, out);
}

void cmd_eval(const Flags& f, std::ostream& out) {
  const AppConfig c = resolve_config(f);
  if (c.controllers.size() < 2) throw UsageError("eval needs at least two controllers");
  std::vector<ControllerKind> kinds;
  for (const auto& name : c.controllers) {
    const auto k = parse_controller(name);
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) throw UsageError("duplicate controller " + name);
    kinds.push_back(k);
  }
  std::optional<MlModels> models;
  if (std::find(kinds.begin(), kinds.end(), ControllerKind::ML) != kinds.end()) {
    if (!f.tcn_path || !f.ppo_path) throw UsageError("the ml controller needs --tcn and --ppo checkpoints");
    models.emplace(MlModels{load_tcn(*f.tcn_path), load_agent(*f.ppo_path)});
  }
  const fs::path dir = output_dir(f);
  const ProtocolConfig& proto = c.active_protocol();
  const ScenarioSpec spec{c.scenario, c.blocks, c.seed, {}};
  const auto event = first_event_block(make_scenario(spec));
  const int threads = worker_threads();

  std::vector<std::vector<EpisodeLog>> runs;
  for (const auto k : kinds)
    runs.push_back(run_closed_loop(c.link, proto, spec, k, c.seeds, c.loop, models ? &*models : nullptr, threads));
  const RunMetrics metrics = compare(runs, c.loop, event);

  for (const auto& logs : runs) {
    for (const auto& log : logs) {
      const auto name = "episode_" + std::string(controller_name(log.controller)) + "_" + c.scenario + "_seed" +
                        std::to_string(log.seed) + ".csv";
      write_file(dir / name, [&](std::ostream& os) { write_episode_csv(os, log); }, out);
    }
  }
  write_file(dir / ("metrics_" + c.scenario + ".csv"), [&](std::ostream& os) { write_run_metrics_csv(os, metrics); },
             out);
}

void cmd_show_config(const Flags& f, std::ostream& out) {
  out << to_json(resolve_config(f)).dump(2) << '\n';
}

}  // namespace

int worker_threads() {
  int n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OPTIQKD_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (*end != '\0' || cap < 1) throw UsageError("OPTIQKD_THREADS must be a positive integer");
    n = std::min<long>(n, cap);
  }
  return n;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adaptive QKD link simulator", "qkdsim"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config_path, "JSON config; omitted keys keep their defaults");
  app.add_option("--set", f.sets, "Override one config key, e.g. --set link.distance_km=50")
      ->allow_extra_args(false);
  app.add_option("--seed", f.seed, "Seed for training and scenario randomness");
  app.add_option("--seeds", f.seeds, "Run seeds: N..M or a comma list");
  app.add_option("--out", f.out_dir, "Output directory");
  app.add_option("--protocol", f.protocol, "bb84, e91 or cow");
  app.add_option("--scenario", f.scenario, "Scenario name");
  app.add_option("--blocks", f.blocks, "Blocks per run");

  auto* rates = app.add_subcommand("rates", "Key-rate table over the distance grid");
  auto* simulate = app.add_subcommand("simulate", "Telemetry CSVs at nominal control");
  auto* train = app.add_subcommand("train", "Train the forecaster (tcn) or the policy (ppo)");
  train->add_option("what", f.train_what, "tcn or ppo")->required()->check(CLI::IsMember({"tcn", "ppo"}));
  train->add_option("--tcn", f.tcn_path, "Forecaster checkpoint for ppo training");
  train->add_flag("--toy", f.toy, "Train ppo on the 1-D quadratic toy task");
  auto* eval = app.add_subcommand("eval", "Closed-loop comparison of controllers");
  eval->add_option("--tcn", f.tcn_path, "Forecaster checkpoint");
  eval->add_option("--ppo", f.ppo_path, "Policy checkpoint");
  eval->add_option("--controllers", f.controllers, "Comma list of ml, static, recalib")->delimiter(',');
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

  std::vector<std::string> argv_store{"qkdsim"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (rates->parsed()) cmd_rates(f, out);
    else if (simulate->parsed()) cmd_simulate(f, out);
    else if (train->parsed()) cmd_train(f, out);
    else if (eval->parsed()) cmd_eval(f, out);
    else if (show->parsed()) cmd_show_config(f, out);
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace qkd::cli
