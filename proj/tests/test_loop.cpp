#include <cmath>
#include <sstream>

#include "doctest.h"
#include "qkd/loop.hpp"

using namespace qkd;
using doctest::Approx;

namespace {

const ProtocolConfig kBb84 = ProtocolConfig::defaults(Protocol::BB84Decoy);

MlModels tiny_models(Protocol p = Protocol::BB84Decoy) {
  TcnConfig tcn;
  tcn.epochs = 2;
  PpoConfig ppo;
  ppo.rollout = 64;
  ppo.minibatch = 32;
  MlTrainConfig train;
  train.tcn_blocks = 200;
  train.ppo_episodes = 1;
  train.episode_blocks = 200;
  return train_ml_models(LinkParams{}, ProtocolConfig::defaults(p), tcn, ppo, LoopConfig{}, train, 11);
}

const MlModels& shared_models() {
  static const MlModels m = tiny_models();
  return m;
}

EpisodeLog synthetic_log(ControllerKind k, std::uint64_t seed, const std::vector<double>& skr,
                         const std::string& scenario = "synthetic") {
  EpisodeLog log;
  log.controller = k;
  log.seed = seed;
  log.scenario = scenario;
  for (std::size_t t = 0; t < skr.size(); ++t) {
    BlockRecord r;
    r.block = static_cast<int>(t);
    r.skr_bps = skr[t];
    r.telem.e_mu_hat = 0.02;
    log.records.push_back(r);
  }
  return log;
}

std::string csv_of(const EpisodeLog& log) {
  std::ostringstream os;
  write_episode_csv(os, log);
  return os.str();
}

}  // namespace

TEST_CASE("controller names") {
  for (auto k : {ControllerKind::ML, ControllerKind::Static, ControllerKind::Recalib})
    CHECK(parse_controller(controller_name(k)) == k);
  CHECK_THROWS_AS(parse_controller("pid"), std::invalid_argument);
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK_THROWS(median({}));
}

TEST_CASE("measured rate at model estimates reproduces the model rate") {
  const LinkParams link;
  const auto model = evaluate_protocol(link, kBb84);
  Telemetry t;
  t.n_sifted = 1;
  t.q_mu_hat = model.q_mu;
  t.e_mu_hat = model.e_mu;
  t.q_w_hat = model.weak.gain;
  t.e_w_hat = model.weak.qber;
  t.y0_hat = link.y0;
  const auto r = measured_rate(t, ControlState::nominal(kBb84), kBb84, link.f_rep);
  CHECK(r.skr_bps == Approx(model.report.r_bps).epsilon(1e-12));
  CHECK(r.skr_finite <= r.skr_bps);
  t.aborted = true;
  CHECK(measured_rate(t, ControlState::nominal(kBb84), kBb84, link.f_rep).skr_bps == 0.0);
}

TEST_CASE("static under nominal: constant control, no aborts, positive SKR") {
  const LoopConfig cfg;
  const auto logs = run_closed_loop(LinkParams{}, kBb84, {"nominal", 200, 0, {}}, ControllerKind::Static,
                                    {1, 2, 3, 4, 5}, cfg, nullptr, 2);
  std::vector<double> medians;
  for (const auto& log : logs) {
    for (const auto& r : log.records) {
      CHECK(r.ctrl == log.records.front().ctrl);
      CHECK_FALSE(r.aborted);
    }
    medians.push_back(seed_metrics(log, cfg, std::nullopt).median_skr_bps);
  }
  const auto ci = bootstrap_ci(medians, CounterRng(1));
  CHECK(ci.lo > 0.0);
}

TEST_CASE("forced high QBER aborts within three blocks and resets control") {
  const LoopConfig cfg;
  const ScenarioSpec sc{"forced-high-qber", 200, 0, {}};
  for (auto kind : {ControllerKind::Static, ControllerKind::Recalib, ControllerKind::ML}) {
    const auto log = run_episode(LinkParams{}, kBb84, sc, kind, 3, cfg, &shared_models());
    int first = -1;
    for (const auto& r : log.records)
      if (r.aborted && first < 0) first = r.block;
    CHECK(first >= 0);
    CHECK(first <= 2);
    for (std::size_t t = 0; t + 1 < log.records.size(); ++t) {
      const auto& r = log.records[t];
      if (r.aborted) {
        CHECK(r.skr_bps == 0.0);
        CHECK(r.reward <= -1.0);
        if (kind == ControllerKind::Static) CHECK(log.records[t + 1].ctrl == ControlState::nominal(kBb84));
      }
    }
  }
}

TEST_CASE("abort rule: exactly the two-block exceedances abort") {
  CounterRng rng(4);
  std::vector<double> depol(240);
  for (double& p : depol) p = rng.uniform() < 0.5 ? 0.0 : 0.25;
  const ScenarioSpec sc{"explicit", 240, 0, depol};
  const auto log = run_episode(LinkParams{}, kBb84, sc, ControllerKind::Static, 4, LoopConfig{});
  int aborts = 0;
  for (std::size_t t = 0; t < log.records.size(); ++t) {
    const double q = log.records[t].telem.e_mu_hat;
    const bool prev = t > 0 && log.records[t - 1].telem.e_mu_hat > 0.11;
    CHECK(log.records[t].aborted == (q > 0.11 && prev));
    aborts += log.records[t].aborted;
  }
  CHECK(aborts > 0);
}

TEST_CASE("same configuration and seed give identical logs") {
  const ScenarioSpec sc{"noise-sweep", 200, 0, {}};
  const auto a = run_episode(LinkParams{}, kBb84, sc, ControllerKind::ML, 9, LoopConfig{}, &shared_models());
  const auto b = run_episode(LinkParams{}, kBb84, sc, ControllerKind::ML, 9, LoopConfig{}, &shared_models());
  CHECK(csv_of(a) == csv_of(b));
  const auto c = run_episode(LinkParams{}, kBb84, sc, ControllerKind::ML, 10, LoopConfig{}, &shared_models());
  CHECK(csv_of(a) != csv_of(c));

  const auto one = run_closed_loop(LinkParams{}, kBb84, sc, ControllerKind::ML, {5, 6, 7}, LoopConfig{},
                                   &shared_models(), 1);
  const auto three = run_closed_loop(LinkParams{}, kBb84, sc, ControllerKind::ML, {5, 6, 7}, LoopConfig{},
                                     &shared_models(), 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(csv_of(one[i]) == csv_of(three[i]));
}

TEST_CASE("baselines never touch the learned models") {
  const ScenarioSpec sc{"noise-sweep", 200, 0, {}};
  const auto s = run_episode(LinkParams{}, kBb84, sc, ControllerKind::Static, 1, LoopConfig{}, &shared_models());
  const auto r = run_episode(LinkParams{}, kBb84, sc, ControllerKind::Recalib, 1, LoopConfig{});
  for (const auto* log : {&s, &r}) {
    CHECK(log->calls.tcn_predict == 0);
    CHECK(log->calls.ppo_act == 0);
    CHECK(log->calls.ppo_update == 0);
  }
  const auto m = run_episode(LinkParams{}, kBb84, sc, ControllerKind::ML, 1, LoopConfig{}, &shared_models());
  CHECK(m.calls.tcn_predict == 199);
  CHECK(m.calls.ppo_act == 199);
  CHECK(m.calls.ppo_update == m.ppo_updates.size());
  CHECK(m.ppo_updates.size() >= 3);
}

TEST_CASE("per-block invariants") {
  const LoopConfig cfg;
  const ScenarioSpec sc{"noise-sweep", 240, 0, {}};
  const auto log = run_episode(LinkParams{}, kBb84, sc, ControllerKind::ML, 2, cfg, &shared_models());
  double bits = 0.0;
  const SafetyBounds b;
  for (std::size_t t = 0; t < log.records.size(); ++t) {
    const auto& r = log.records[t];
    CHECK(r.block == static_cast<int>(t));
    CHECK(r.skr_bps >= 0.0);
    CHECK(r.skr_finite >= 0.0);
    CHECK(r.skr_finite <= r.skr_bps);
    CHECK(r.ctrl.mu_s >= b.mu_s_min);
    CHECK(r.ctrl.mu_s <= b.mu_s_max);
    CHECK(r.ctrl.mu_w < r.ctrl.mu_s - b.mu_gap);
    bits += r.skr_bps * cfg.block_seconds;
  }
  CHECK(seed_metrics(log, cfg, std::nullopt).total_bits == Approx(bits).epsilon(1e-9));
}

TEST_CASE("ML agent must match the protocol mask") {
  const MlModels cow = tiny_models(Protocol::COW);
  CHECK_THROWS_AS(run_episode(LinkParams{}, kBb84, {"nominal", 200, 0, {}}, ControllerKind::ML, 1,
                              LoopConfig{}, &cow),
                  std::invalid_argument);
  CHECK_THROWS_AS(run_episode(LinkParams{}, kBb84, {"nominal", 200, 0, {}}, ControllerKind::ML, 1,
                              LoopConfig{}, nullptr),
                  std::invalid_argument);
}

TEST_CASE("recalib: scans at multiples of the period and holds the best intensity") {
  const LoopConfig cfg;
  const ScenarioSpec sc{"splice-3db", 200, 0, {}};
  const auto log = run_episode(LinkParams{}, kBb84, sc, ControllerKind::Recalib, 6, cfg);
  const int period = cfg.recalib_period;
  const int g = static_cast<int>(cfg.recalib_grid.size());
  for (int t = 1; t < 200; ++t) {
    const auto& r = log.records[t];
    const int phase = t % period;
    if (phase < g) {
      CHECK(r.ctrl.mu_s == cfg.recalib_grid[phase]);
    } else if (phase > g) {
      CHECK(r.ctrl == log.records[t - 1].ctrl);
    } else {
      // First held block after a scan: the argmax of the five scan blocks.
      int best = t - g;
      for (int k = t - g; k < t; ++k)
        if (log.records[k].skr_bps > log.records[best].skr_bps) best = k;
      CHECK(r.ctrl.mu_s == log.records[best].ctrl.mu_s);
    }
  }
  // The splice at block 100 changes nothing until the scan at 105.
  for (int t = 100; t < 105; ++t) CHECK(log.records[t].ctrl == log.records[99].ctrl);
}

TEST_CASE("adaptation time") {
  std::vector<double> skr(50, 100.0);
  for (double v : {40.0, 60.0, 70.0, 96.0, 97.0, 98.0, 99.0}) skr.push_back(v);
  CHECK(adaptation_time(skr, 50) == 3);

  std::vector<double> never(50, 100.0);
  never.resize(120, 80.0);
  CHECK_FALSE(adaptation_time(never, 50).has_value());

  std::vector<double> osc(50, 100.0);
  for (double v : {96.0, 80.0, 96.0, 96.0, 96.0}) osc.push_back(v);
  CHECK(adaptation_time(osc, 50) == 2);

  CHECK_THROWS_AS(adaptation_time(skr, 20), std::invalid_argument);
  CHECK_THROWS_AS(adaptation_time(skr, 57), std::invalid_argument);
}

TEST_CASE("medians skip the warm-up blocks") {
  std::vector<double> skr(300, 10.0);
  for (int t = 0; t < 100; ++t) skr[t] = 1e6;
  const auto m = seed_metrics(synthetic_log(ControllerKind::Static, 1, skr), LoopConfig{}, std::nullopt);
  CHECK(m.median_skr_bps == 10.0);
}

TEST_CASE("bootstrap and comparison") {
  const auto degenerate = bootstrap_ci({4.2, 4.2, 4.2}, CounterRng(2));
  CHECK(degenerate.lo == 4.2);
  CHECK(degenerate.hi == 4.2);
  CHECK_THROWS(bootstrap_ci({}, CounterRng(2)));

  const LoopConfig cfg;
  std::vector<EpisodeLog> ml, st;
  CounterRng rng(8);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    std::vector<double> a(300), b(300);
    for (int t = 0; t < 300; ++t) {
      b[t] = 100.0 + 10.0 * rng.uniform();
      a[t] = 1.2 * b[t];
    }
    ml.push_back(synthetic_log(ControllerKind::ML, s, a));
    st.push_back(synthetic_log(ControllerKind::Static, s, b));
  }
  const auto m = compare({ml, st}, cfg, std::nullopt, 2000);
  for (const auto& row : m.rows) {
    CHECK(row.ci_lo <= row.value);
    CHECK(row.value <= row.ci_hi);
  }
  const auto* gain = m.find("ml", "skr_change_vs_static_pct");
  REQUIRE(gain != nullptr);
  const double expect = 100.0 * (m.find("ml", "median_skr_bps")->value - m.find("static", "median_skr_bps")->value) /
                        m.find("static", "median_skr_bps")->value;
  CHECK(gain->value == Approx(expect));
  CHECK(gain->value == Approx(20.0).epsilon(1e-9));

  auto ml_as_static = ml;
  for (auto& l : ml_as_static) l.controller = ControllerKind::Static;
  const auto self = compare({ml, ml_as_static}, cfg, std::nullopt, 2000);
  const auto* zero = self.find("ml", "skr_change_vs_static_pct");
  REQUIRE(zero != nullptr);
  CHECK(zero->value == 0.0);
  CHECK(zero->ci_lo <= 0.0);
  CHECK(zero->ci_hi >= 0.0);

  CHECK_THROWS_AS(compare({ml}, cfg, std::nullopt), std::invalid_argument);
  auto other = st;
  other[0].scenario = "elsewhere";
  CHECK_THROWS_AS(compare({ml, other}, cfg, std::nullopt), std::invalid_argument);
}

TEST_CASE("splice comparison fills adaptation rows") {
  LoopConfig cfg;
  const ScenarioSpec sc{"splice-3db", 240, 0, {}};
  const auto event = first_event_block(make_scenario(sc));
  REQUIRE(event == 120);
  const auto st = run_closed_loop(LinkParams{}, kBb84, sc, ControllerKind::Static, {1, 2}, cfg);
  const auto rc = run_closed_loop(LinkParams{}, kBb84, sc, ControllerKind::Recalib, {1, 2}, cfg);
  const auto m = compare({st, rc}, cfg, event, 500);
  for (const char* c : {"static", "recalib"}) {
    CHECK(m.find(c, "adaptation_blocks") != nullptr);
    CHECK(m.find(c, "adaptation_seconds") != nullptr);
    CHECK(m.find(c, "adaptation_recovered") != nullptr);
  }
  CHECK(m.find("ml", "skr_change_vs_static_pct") == nullptr);
}

TEST_CASE("CSV schemas") {
  const auto log = run_episode(LinkParams{}, kBb84, {"nominal", 200, 0, {}}, ControllerKind::Static, 1,
                               LoopConfig{});
  std::istringstream in(csv_of(log));
  std::string line;
  std::getline(in, line);
  CHECK(line ==
        "block,n_pulses,n_sifted,n_errors,q_mu_hat,e_mu_hat,e_lo,e_hi,v_hat,eta_hat,aborted,"
        "mu_s,mu_w,p_z,theta_c,phi_c,skr_bps,skr_finite,reward,controller");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 19);
    CHECK(line.substr(line.rfind(',') + 1) == "static");
  }
  CHECK(rows == 200);

  RunMetrics m;
  m.rows.push_back({"ml", "noise-sweep", "median_qber", 0.03, 0.029, 0.031});
  std::ostringstream os;
  write_run_metrics_csv(os, m);
  CHECK(os.str() == "controller,scenario,metric,value,ci_lo,ci_hi\nml,noise-sweep,median_qber,0.03,0.029,0.031\n");
}

TEST_CASE("loop config validation and JSON") {
  LoopConfig c;
  c.recalib_period = 3;
  CHECK_THROWS(c.validate());
  c = {};
  nlohmann::json j = c;
  LoopConfig back = j.get<LoopConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.sim.n_pulses == 250'000'000);
  CHECK_THROWS(run_closed_loop(LinkParams{}, kBb84, {"nominal", 150, 0, {}}, ControllerKind::Static, {1}, c));
  CHECK_THROWS(run_closed_loop(LinkParams{}, kBb84, {"nominal", 200, 0, {}}, ControllerKind::Static, {}, c));
}
