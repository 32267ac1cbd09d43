#include "qkd/loop.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace qkd {

std::string_view controller_name(ControllerKind k) {
  switch (k) {
    case ControllerKind::ML: return "ml";
    case ControllerKind::Static: return "static";
    case ControllerKind::Recalib: return "recalib";
  }
  return "?";
}

ControllerKind parse_controller(std::string_view name) {
  if (name == "ml") return ControllerKind::ML;
  if (name == "static") return ControllerKind::Static;
  if (name == "recalib") return ControllerKind::Recalib;
  throw std::invalid_argument("unknown controller '" + std::string(name) + "'");
}

void LoopConfig::validate() const {
  if (warmup_blocks < 0) throw std::invalid_argument("loop.warmup_blocks must be >= 0");
  if (pre_event_window < 1) throw std::invalid_argument("loop.pre_event_window must be >= 1");
  if (!(block_seconds > 0.0)) throw std::invalid_argument("loop.block_seconds must be > 0");
  if (recalib_period < static_cast<int>(recalib_grid.size()) || recalib_grid.empty())
    throw std::invalid_argument("loop.recalib_period must cover the grid scan");
  if (!auto_skr_ref) reward.validate();
  if (sim.n_pulses == 0) throw std::invalid_argument("loop.sim.n_pulses must be > 0");
}

void to_json(nlohmann::json& j, const LoopConfig& c) {
  j = {{"warmup_blocks", c.warmup_blocks},
       {"pre_event_window", c.pre_event_window},
       {"block_seconds", c.block_seconds},
       {"recalib_period", c.recalib_period},
       {"recalib_grid", c.recalib_grid},
       {"auto_skr_ref", c.auto_skr_ref},
       {"online_updates", c.online_updates},
       {"reward",
        {{"w_rate", c.reward.w_rate},
         {"w_err", c.reward.w_err},
         {"skr_ref", c.reward.skr_ref},
         {"qber_ref", c.reward.qber_ref},
         {"abort_penalty", c.reward.abort_penalty}}},
       {"n_pulses", c.sim.n_pulses},
       {"confidence", c.sim.confidence},
       {"abort_threshold", c.sim.abort_threshold}};
}

void from_json(const nlohmann::json& j, LoopConfig& c) {
  c.warmup_blocks = j.at("warmup_blocks").get<int>();
  c.pre_event_window = j.at("pre_event_window").get<int>();
  c.block_seconds = j.at("block_seconds").get<double>();
  c.recalib_period = j.at("recalib_period").get<int>();
  c.recalib_grid = j.at("recalib_grid").get<std::vector<double>>();
  c.auto_skr_ref = j.at("auto_skr_ref").get<bool>();
  c.online_updates = j.at("online_updates").get<bool>();
  const auto& r = j.at("reward");
  c.reward.w_rate = r.at("w_rate").get<double>();
  c.reward.w_err = r.at("w_err").get<double>();
  c.reward.skr_ref = r.at("skr_ref").get<double>();
  c.reward.qber_ref = r.at("qber_ref").get<double>();
  c.reward.abort_penalty = r.at("abort_penalty").get<double>();
  c.sim.n_pulses = j.at("n_pulses").get<std::uint64_t>();
  c.sim.confidence = j.at("confidence").get<double>();
  c.sim.abort_threshold = j.at("abort_threshold").get<double>();
}

void to_json(nlohmann::json& j, const MlTrainConfig& c) {
  j = {{"tcn_blocks", c.tcn_blocks},
       {"ppo_episodes", c.ppo_episodes},
       {"episode_blocks", c.episode_blocks},
       {"random_start", c.random_start}};
}

void from_json(const nlohmann::json& j, MlTrainConfig& c) {
  c.tcn_blocks = j.at("tcn_blocks").get<int>();
  c.ppo_episodes = j.at("ppo_episodes").get<int>();
  c.episode_blocks = j.at("episode_blocks").get<int>();
  c.random_start = j.at("random_start").get<bool>();
}

MeasuredRate measured_rate(const Telemetry& t, const ControlState& ctrl, const ProtocolConfig& proto,
                           double f_rep) {
  if (t.aborted || t.n_sifted == 0) return {};
  KeyRateReport rep;
  switch (proto.kind) {
    case Protocol::BB84Decoy: {
      ProtocolConfig local = proto;
      local.bb84.mu_s = ctrl.mu_s;
      local.bb84.mu_w = ctrl.mu_w;
      try {
        const DecoyBounds b =
            decoy_bounds({t.q_mu_hat, t.e_mu_hat}, {t.q_w_hat, t.e_w_hat}, local, t.y0_hat);
        rep = bb84_key_rate(b, t.q_mu_hat, t.e_mu_hat, local, f_rep);
      } catch (const BoundInfeasible&) {
        return {};
      } catch (const DomainError&) {
        return {};
      }
      break;
    }
    case Protocol::E91: {
      const ChshPoint chsh = e91_quantities(std::clamp(1.0 - 2.0 * t.e_mu_hat, 0.0, 1.0));
      rep = e91_key_rate(chsh.s, chsh.qber, proto, f_rep, t.q_mu_hat);
      break;
    }
    case Protocol::COW: {
      const double e_ph = (1.0 - std::clamp(t.v_hat, 0.0, 1.0)) / 2.0;
      rep = cow_key_rate(t.q_mu_hat, t.e_mu_hat, e_ph, proto, f_rep);
      break;
    }
  }
  return {rep.r_bps, rep.r_finite * f_rep};
}

double nominal_skr_bps(const LinkParams& link, const ProtocolConfig& proto) {
  return evaluate_protocol(link, proto).report.r_bps;
}

namespace {

void check_agent(const PpoAgent& agent, const ProtocolConfig& proto) {
  const ActionMask want = action_mask(proto.kind);
  const auto& have = agent.mask();
  bool ok = agent.obs_dim() == kObsDim && have.size() == static_cast<std::size_t>(kActionDim);
  for (int i = 0; ok && i < kActionDim; ++i) ok = have[i] == want[i];
  if (!ok)
    throw std::invalid_argument("ML agent does not match the " + std::string(protocol_name(proto.kind)) +
                                " action mask");
}

// Recalibration state: scans the grid for grid.size() blocks starting at
// every multiple of the period, then holds the best intensity.
class Recalibrator {
 public:
  Recalibrator(const LoopConfig& cfg, ControlState nominal) : cfg_(cfg), nominal_(nominal), held_(nominal) {}

  ControlState control(int t) const {
    const int phase = t % cfg_.recalib_period;
    if (phase < static_cast<int>(cfg_.recalib_grid.size())) {
      ControlState c = held_;
      c.mu_s = cfg_.recalib_grid[phase];
      return safety_filter(c);
    }
    return held_;
  }

  void observe(int t, const ControlState& used, double skr) {
    const int phase = t % cfg_.recalib_period;
    const int g = static_cast<int>(cfg_.recalib_grid.size());
    if (phase >= g) return;
    if (phase == 0) {
      best_skr_ = -1.0;
      best_ = held_;
    }
    if (skr > best_skr_) {
      best_skr_ = skr;
      best_ = used;
    }
    if (phase == g - 1) held_ = best_skr_ > 0.0 ? best_ : held_;
  }

  void reset() { held_ = nominal_; }

 private:
  const LoopConfig& cfg_;
  ControlState nominal_;
  ControlState held_;
  ControlState best_;
  double best_skr_ = -1.0;
};

CallCounters diff(const CallCounters& a, const CallCounters& b) {
  return {a.tcn_predict - b.tcn_predict, a.ppo_act - b.ppo_act, a.ppo_update - b.ppo_update};
}

// `ml` is updated in place when given. `start` replaces the nominal state for
// block 0 only; aborts still reset to nominal.
EpisodeLog run_impl(const LinkParams& link, const ProtocolConfig& proto, const ScenarioSpec& scenario,
                    ControllerKind kind, std::uint64_t seed, const LoopConfig& cfg_in, MlModels* ml,
                    std::optional<ControlState> start = std::nullopt) {
  cfg_in.validate();
  LoopConfig cfg = cfg_in;
  if (cfg.auto_skr_ref) {
    const double ref = nominal_skr_bps(link, proto);
    cfg.reward.skr_ref = ref > 0.0 ? ref : 1.0;
  }
  cfg.reward.validate();

  if (kind == ControllerKind::ML) {
    if (ml == nullptr) throw std::invalid_argument("run_episode: ML controller needs trained models");
    check_agent(ml->agent, proto);
  }

  const CallCounters calls_before = call_counters();
  ChannelSimulator sim(link, make_scenario(scenario), proto, seed, cfg.sim);
  const CounterRng root = CounterRng(seed).split("controller");
  CounterRng act_rng = root.split("act");
  CounterRng update_rng = root.split("update");
  const ActionMask mask = action_mask(proto.kind);
  const ControlState nominal = safety_filter(ControlState::nominal(proto));
  Recalibrator recal(cfg, nominal);

  EpisodeLog log;
  log.scenario = scenario.name;
  log.seed = seed;
  log.controller = kind;
  log.records.reserve(static_cast<std::size_t>(scenario.blocks));

  std::vector<std::vector<double>> history;
  ControlState ctrl = start ? safety_filter(*start) : nominal;
  for (int t = 0; !sim.done(); ++t) {
    std::vector<double> obs;
    ActOutput out;
    bool acted = false;
    if (kind == ControllerKind::ML && t > 0) {
      const Forecast fc = ml->tcn.predict(history);
      obs = observe(fc, ml->tcn.config().features, log.records.back().telem, ctrl);
      out = ml->agent.act(obs, act_rng, !cfg.online_updates);
      ctrl = apply_action(ctrl, to_action(out), mask);
      acted = !out.fallback;
    } else if (kind == ControllerKind::Recalib) {
      ctrl = recal.control(t);
    }

    BlockRecord rec;
    rec.block = t;
    rec.ctrl = ctrl;
    rec.telem = sim.step(ctrl);
    rec.aborted = rec.telem.aborted;
    const MeasuredRate rate = measured_rate(rec.telem, ctrl, proto, link.f_rep);
    rec.skr_bps = rate.skr_bps;
    rec.skr_finite = std::min(rate.skr_finite, rate.skr_bps);
    rec.reward = reward(rec.skr_bps, rec.telem.e_mu_hat, rec.aborted, cfg.reward);

    if (kind == ControllerKind::ML) {
      history.push_back(feature_row(rec.telem, ml->tcn.config().features));
      if (acted && cfg.online_updates) {
        ml->agent.store({std::move(obs), out.pre_squash, out.log_prob, out.value, rec.reward});
        if (ml->agent.ready()) log.ppo_updates.push_back(ml->agent.update(update_rng));
      }
    } else if (kind == ControllerKind::Recalib) {
      recal.observe(t, ctrl, rec.skr_bps);
    }

    if (rec.aborted) {
      ctrl = nominal;
      recal.reset();
    }
    log.records.push_back(std::move(rec));
  }
  log.calls = diff(call_counters(), calls_before);
  return log;
}

}  // namespace

EpisodeLog run_episode(const LinkParams& link, const ProtocolConfig& proto, const ScenarioSpec& scenario,
                       ControllerKind kind, std::uint64_t seed, const LoopConfig& cfg,
                       const MlModels* models) {
  std::optional<MlModels> copy;
  if (kind == ControllerKind::ML && models != nullptr) copy.emplace(*models);
  return run_impl(link, proto, scenario, kind, seed, cfg, copy ? &*copy : nullptr);
}

std::vector<EpisodeLog> run_closed_loop(const LinkParams& link, const ProtocolConfig& proto,
                                        const ScenarioSpec& scenario, ControllerKind kind,
                                        const std::vector<std::uint64_t>& seeds, const LoopConfig& cfg,
                                        const MlModels* models, int threads) {
  if (seeds.empty()) throw std::invalid_argument("run_closed_loop: no seeds");
  if (scenario.blocks < 200) throw std::invalid_argument("run_closed_loop: blocks must be >= 200");
  std::vector<EpisodeLog> logs(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  auto job = [&](std::size_t i) {
    try {
      logs[i] = run_episode(link, proto, scenario, kind, seeds[i], cfg, models);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t width = static_cast<std::size_t>(std::max(1, threads));
  for (std::size_t start = 0; start < seeds.size(); start += width) {
    std::vector<std::jthread> pool;
    const std::size_t end = std::min(seeds.size(), start + width);
    for (std::size_t i = start + 1; i < end; ++i) pool.emplace_back(job, i);
    job(start);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return logs;
}

namespace {

void check_lengths(const MlTrainConfig& train) {
  if (train.ppo_episodes < 0 || train.episode_blocks < 1 || train.tcn_blocks < 1)
    throw std::invalid_argument("ml training: invalid training lengths");
}

}  // namespace

std::vector<std::vector<double>> forecaster_stream(const LinkParams& link, const ProtocolConfig& proto,
                                                   const TcnConfig& tcn, const LoopConfig& loop,
                                                   const MlTrainConfig& train, std::uint64_t seed) {
  check_lengths(train);
  const CounterRng root = CounterRng(seed).split("ml-train");
  ScenarioSpec sc{"train-mix", train.tcn_blocks, root.split("tcn-scenario").key(), {}};
  return feature_stream(link, proto, make_scenario(sc), root.split("tcn-channel").key(), tcn.features,
                        loop.sim);
}

Tcn train_forecaster(const LinkParams& link, const ProtocolConfig& proto, const TcnConfig& tcn_cfg,
                     const LoopConfig& loop, const MlTrainConfig& train, std::uint64_t seed,
                     TcnTrainReport* report) {
  const auto rows = forecaster_stream(link, proto, tcn_cfg, loop, train, seed);
  const CounterRng root = CounterRng(seed).split("ml-train");
  Tcn tcn(tcn_cfg, root.split("tcn-init").key());
  auto rep = tcn.train(rows, root.split("tcn-fit").key());
  if (report) *report = std::move(rep);
  return tcn;
}

PpoAgent train_policy(const LinkParams& link, const ProtocolConfig& proto, const Tcn& tcn,
                      const PpoConfig& ppo, const LoopConfig& loop, const MlTrainConfig& train,
                      std::uint64_t seed, std::vector<PpoReport>* history) {
  check_lengths(train);
  const CounterRng root = CounterRng(seed).split("ml-train");
  MlModels models{tcn, make_qkd_agent(proto.kind, ppo, root.split("ppo-init").key())};
  LoopConfig online = loop;
  online.online_updates = true;
  for (int e = 0; e < train.ppo_episodes; ++e) {
    const CounterRng ep = root.split("episode").split(static_cast<std::uint64_t>(e));
    ScenarioSpec sc{"train-mix", train.episode_blocks, ep.split("scenario").key(), {}};
    ControlState start = ControlState::nominal(proto);
    if (train.random_start) {
      CounterRng r = ep.split("start");
      const SafetyBounds b;
      start.mu_s = b.mu_s_min + (b.mu_s_max - b.mu_s_min) * r.uniform();
      start.mu_w = b.mu_w_min + (b.mu_w_max - b.mu_w_min) * r.uniform();
      start.theta_c = b.theta_min + (b.theta_max - b.theta_min) * r.uniform();
      start.phi_c = b.phi_min + (b.phi_max - b.phi_min) * r.uniform();
    }
    auto log = run_impl(link, proto, sc, ControllerKind::ML, ep.split("run").key(), online, &models, start);
    if (history) history->insert(history->end(), log.ppo_updates.begin(), log.ppo_updates.end());
  }
  return std::move(models.agent);
}

MlModels train_ml_models(const LinkParams& link, const ProtocolConfig& proto, const TcnConfig& tcn_cfg,
                         const PpoConfig& ppo, const LoopConfig& loop, const MlTrainConfig& train,
                         std::uint64_t seed) {
  check_lengths(train);
  Tcn tcn = train_forecaster(link, proto, tcn_cfg, loop, train, seed);
  PpoAgent agent = train_policy(link, proto, tcn, ppo, loop, train, seed);
  return {std::move(tcn), std::move(agent)};
}

// ---- metrics --------------------------------------------------------------

double median(std::vector<double> x) {
  if (x.empty()) throw std::invalid_argument("median of empty set");
  const auto mid = x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2);
  std::nth_element(x.begin(), mid, x.end());
  if (x.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(x.begin(), mid);
  return 0.5 * (lo + hi);
}

std::optional<int> adaptation_time(const std::vector<double>& skr, int event_block, int pre_window) {
  if (event_block < pre_window || event_block >= static_cast<int>(skr.size()))
    throw std::invalid_argument("adaptation_time: needs the event inside the log after " +
                                std::to_string(pre_window) + " pre-event blocks");
  const double target =
      0.95 * median(std::vector<double>(skr.begin() + (event_block - pre_window), skr.begin() + event_block));
  const int n = static_cast<int>(skr.size());
  int run = 0;
  for (int t = event_block; t < n; ++t) {
    run = skr[t] >= target ? run + 1 : 0;
    if (run == 3) return t - 2 - event_block;
  }
  return std::nullopt;
}

std::optional<int> adaptation_time(const EpisodeLog& log, int event_block, int pre_window) {
  std::vector<double> skr;
  skr.reserve(log.records.size());
  for (const auto& r : log.records) skr.push_back(r.skr_bps);
  return adaptation_time(skr, event_block, pre_window);
}

SeedMetrics seed_metrics(const EpisodeLog& log, const LoopConfig& cfg, std::optional<int> event_block) {
  SeedMetrics m;
  m.seed = log.seed;
  std::vector<double> skr, qber;
  for (const auto& r : log.records) {
    m.total_bits += r.skr_bps * cfg.block_seconds;
    if (r.block < cfg.warmup_blocks) continue;
    skr.push_back(r.skr_bps);
    qber.push_back(r.telem.e_mu_hat);
    if (r.aborted) ++m.abort_count;
  }
  if (skr.empty()) throw std::invalid_argument("seed_metrics: no post-warm-up blocks");
  m.median_skr_bps = median(skr);
  m.median_qber = median(qber);
  if (event_block) m.adaptation_blocks = adaptation_time(log, *event_block, cfg.pre_event_window);
  return m;
}

ConfidenceInterval bootstrap_ci(const std::vector<double>& values, CounterRng rng, int resamples,
                                double confidence) {
  if (values.empty()) throw std::invalid_argument("bootstrap_ci: empty sample");
  if (resamples < 1 || !(confidence > 0.0 && confidence < 1.0))
    throw std::invalid_argument("bootstrap_ci: bad resamples/confidence");
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng() % n];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - confidence) / 2.0;
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, means.size() - 1);
    return means[i] + (pos - static_cast<double>(i)) * (means[j] - means[i]);
  };
  return {at(tail), at(1.0 - tail)};
}

const MetricRow* RunMetrics::find(std::string_view controller, std::string_view metric) const {
  for (const auto& r : rows)
    if (r.controller == controller && r.metric == metric) return &r;
  return nullptr;
}

std::optional<int> first_event_block(const NoiseSchedule& sched) {
  std::optional<int> first;
  for (const auto& e : sched.events)
    if (!first || e.block_index < *first) first = e.block_index;
  return first;
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

CounterRng metric_rng(std::string_view controller, std::string_view metric) {
  return CounterRng(0).split("bootstrap").split(controller).split(metric);
}

// Paired relative change 100 (a - b) / b of the seed means; resampling
// draws seed indices jointly.
MetricRow paired_change(const std::string& scenario, const std::string& metric, const std::vector<double>& a,
                        const std::vector<double>& b, int resamples) {
  MetricRow row{"ml", scenario, metric, 0.0, 0.0, 0.0};
  auto change = [](double ma, double mb) { return mb != 0.0 ? 100.0 * (ma - mb) / mb : 0.0; };
  row.value = change(mean_of(a), mean_of(b));
  CounterRng rng = metric_rng("ml", metric);
  const std::size_t n = a.size();
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  for (double& s : stats) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = rng() % n;
      sa += a[k];
      sb += b[k];
    }
    s = change(sa / static_cast<double>(n), sb / static_cast<double>(n));
  }
  std::sort(stats.begin(), stats.end());
  row.ci_lo = stats[static_cast<std::size_t>(std::floor(0.025 * (resamples - 1)))];
  row.ci_hi = stats[static_cast<std::size_t>(std::ceil(0.975 * (resamples - 1)))];
  return row;
}

}  // namespace

RunMetrics compare(const std::vector<std::vector<EpisodeLog>>& runs, const LoopConfig& cfg,
                   std::optional<int> event_block, int resamples) {
  if (runs.size() < 2) throw std::invalid_argument("compare: needs at least two controllers");
  const auto& ref = runs.front();
  if (ref.empty()) throw std::invalid_argument("compare: empty run set");
  for (const auto& set : runs) {
    if (set.size() != ref.size()) throw std::invalid_argument("compare: mismatched seed sets");
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set[i].scenario != ref[i].scenario || set[i].seed != ref[i].seed)
        throw std::invalid_argument("compare: mismatched scenario/seed sets");
      if (set[i].controller != set.front().controller)
        throw std::invalid_argument("compare: one controller per run set");
    }
  }

  RunMetrics out;
  const std::string scenario = ref.front().scenario;
  for (const auto& set : runs) {
    std::vector<SeedMetrics> seeds;
    for (const auto& log : set) seeds.push_back(seed_metrics(log, cfg, event_block));
    const std::string name(controller_name(set.front().controller));

    auto emit = [&](const std::string& metric, const std::vector<double>& values) {
      if (values.empty()) {
        const double nan = std::nan("");
        out.rows.push_back({name, scenario, metric, nan, nan, nan});
        return;
      }
      const ConfidenceInterval ci = bootstrap_ci(values, metric_rng(name, metric), resamples);
      out.rows.push_back({name, scenario, metric, mean_of(values), ci.lo, ci.hi});
    };
    std::vector<double> skr, qber, aborts, bits, adapt;
    for (const auto& s : seeds) {
      skr.push_back(s.median_skr_bps);
      qber.push_back(s.median_qber);
      aborts.push_back(s.abort_count);
      bits.push_back(s.total_bits);
      if (s.adaptation_blocks) adapt.push_back(*s.adaptation_blocks);
    }
    emit("median_skr_bps", skr);
    emit("median_qber", qber);
    emit("abort_count", aborts);
    emit("total_bits", bits);
    if (event_block) {
      std::vector<double> secs;
      for (double a : adapt) secs.push_back(a * cfg.block_seconds);
      emit("adaptation_blocks", adapt);
      emit("adaptation_seconds", secs);
      const auto recovered = static_cast<double>(adapt.size());
      out.rows.push_back({name, scenario, "adaptation_recovered", recovered, recovered, recovered});
    }
    out.per_seed.emplace_back(set.front().controller, std::move(seeds));
  }

  const std::vector<SeedMetrics>* ml = nullptr;
  const std::vector<SeedMetrics>* st = nullptr;
  for (const auto& [kind, seeds] : out.per_seed) {
    if (kind == ControllerKind::ML && !ml) ml = &seeds;
    if (kind == ControllerKind::Static && !st) st = &seeds;
  }
  if (ml && st) {
    std::vector<double> a, b, qa, qb;
    for (std::size_t i = 0; i < ml->size(); ++i) {
      a.push_back((*ml)[i].median_skr_bps);
      b.push_back((*st)[i].median_skr_bps);
      qa.push_back((*ml)[i].median_qber);
      qb.push_back((*st)[i].median_qber);
    }
    out.rows.push_back(paired_change(scenario, "skr_change_vs_static_pct", a, b, resamples));
    out.rows.push_back(paired_change(scenario, "qber_change_vs_static_pct", qa, qb, resamples));
  }
  return out;
}

void write_episode_csv(std::ostream& out, const EpisodeLog& log) {
  out << kTelemetryCsvHeader << ',' << kEpisodeCsvExtraColumns << '\n';
  const std::string_view name = controller_name(log.controller);
  for (const auto& r : log.records) {
    write_telemetry_fields(out, r.telem);
    out << ',' << format_sig10(r.ctrl.mu_s) << ',' << format_sig10(r.ctrl.mu_w) << ','
        << format_sig10(r.ctrl.p_z) << ',' << format_sig10(r.ctrl.theta_c) << ','
        << format_sig10(r.ctrl.phi_c) << ',' << format_sig10(r.skr_bps) << ','
        << format_sig10(r.skr_finite) << ',' << format_sig10(r.reward) << ',' << name << '\n';
  }
}

void write_run_metrics_csv(std::ostream& out, const RunMetrics& m) {
  out << kRunMetricsCsvHeader << '\n';
  for (const auto& r : m.rows)
    out << r.controller << ',' << r.scenario << ',' << r.metric << ',' << format_sig10(r.value) << ','
        << format_sig10(r.ci_lo) << ',' << format_sig10(r.ci_hi) << '\n';
}

}  // namespace qkd
