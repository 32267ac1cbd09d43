#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracle_data.hpp"
#include "qkd/channel.hpp"

using namespace qkd;
using doctest::Approx;

namespace {

NoiseSchedule constant_depol(int blocks, double p) {
  ScenarioSpec spec;
  spec.name = "explicit";
  spec.blocks = blocks;
  spec.depol_series.assign(static_cast<std::size_t>(blocks), p);
  return make_scenario(spec);
}

const ProtocolConfig kBb84 = ProtocolConfig::defaults(Protocol::BB84Decoy);

}  // namespace

TEST_CASE("named scenarios") {
  SUBCASE("nominal") {
    const auto s = make_scenario({"nominal", 50});
    CHECK(s.blocks() == 50);
    CHECK(s.events.empty());
    for (int t = 0; t < 50; ++t) {
      CHECK(s.depol(t) == 0.0);
      CHECK(s.gamma(t) == 0.0);
      CHECK(s.tilt(t) == 0.0);
    }
  }
  SUBCASE("splice-3db puts one loss step at the midpoint") {
    const auto s = make_scenario({"splice-3db", 200});
    REQUIRE(s.events.size() == 1);
    CHECK(s.events[0].block_index == 100);
    CHECK(s.events[0].kind == EventKind::StepLossDb);
    CHECK(s.events[0].magnitude == 3.0);
    CHECK(s.loss_db(99) == 0.0);
    CHECK(s.loss_db(100) == 3.0);
    CHECK(s.loss_db(199) == 3.0);
  }
  SUBCASE("noise-sweep steps the stress level 0.0 to 0.5 in six segments") {
    const auto s = make_scenario({"noise-sweep", 600});
    for (int seg = 0; seg < 6; ++seg) {
      for (int t = seg * 100; t < (seg + 1) * 100; ++t) {
        const double level = 0.1 * seg;
        CHECK(s.stress_level[t] == Approx(level));
        CHECK(s.depol(t) == Approx(kSweepDepolPerLevel * level));
        CHECK(s.tilt(t) == Approx(kSweepBaseTilt + kSweepTiltPerLevel * level));
      }
    }
  }
  SUBCASE("train-mix is reproducible per seed") {
    const auto a = make_scenario({"train-mix", 800, 7});
    const auto b = make_scenario({"train-mix", 800, 7});
    const auto c = make_scenario({"train-mix", 800, 8});
    CHECK(a.depol_p == b.depol_p);
    CHECK(a.depol_p != c.depol_p);
    for (double l : a.stress_level) CHECK((l >= 0.0 && l <= 0.5));
  }
  SUBCASE("unknown name") {
    CHECK_THROWS_AS(make_scenario({"tornado", 10}), std::invalid_argument);
  }
  SUBCASE("explicit length mismatch") {
    ScenarioSpec spec{"explicit", 5, 0, {0.1, 0.2}};
    CHECK_THROWS_AS(make_scenario(spec), std::invalid_argument);
  }
  SUBCASE("every listed name builds") {
    for (const auto& n : scenario_names()) {
      ScenarioSpec spec{n, 40};
      if (n == "explicit") spec.depol_series.assign(40, 0.0);
      CHECK_NOTHROW(make_scenario(spec));
    }
  }
}

TEST_CASE("schedule invariants") {
  auto s = constant_depol(4, 0.1);
  s.depol_p[2] = 1.2;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = constant_depol(4, 0.1);
  s.damp_gamma[1] = -0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = constant_depol(4, 0.1);
  s.events = {{2, EventKind::StepLossDb, 1.0}, {2, EventKind::StepDepol, 0.1}};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("effective link mapping") {
  const LinkParams link;
  const ControlState ctrl = ControlState::nominal(kBb84);

  SUBCASE("p = 0.1 with perfect alignment") {
    const auto s = constant_depol(1, 0.1);
    const auto eff = effective_link(link, s, ctrl, kBb84, 0);
    CHECK(eff.visibility == Approx(0.9).epsilon(1e-12));
    CHECK(eff.e_d - link.e_d == Approx(0.05).epsilon(1e-12));
  }
  SUBCASE("3 dB loss step") {
    auto s = constant_depol(4, 0.0);
    const double before = effective_link(link, s, ctrl, kBb84, 2).eta;
    s.events.push_back({2, EventKind::StepLossDb, 3.0});
    CHECK(effective_link(link, s, ctrl, kBb84, 1).eta == before);
    CHECK(effective_link(link, s, ctrl, kBb84, 2).eta / before == Approx(0.501).epsilon(1e-3));
  }
  SUBCASE("amplitude damping is pure loss") {
    auto s = constant_depol(1, 0.0);
    const auto ref = effective_link(link, s, ctrl, kBb84, 0);
    s.damp_gamma[0] = 0.2;
    const auto eff = effective_link(link, s, ctrl, kBb84, 0);
    CHECK(eff.eta == Approx(0.8 * ref.eta).epsilon(1e-12));
    CHECK(eff.visibility == ref.visibility);
    CHECK(eff.e_d == ref.e_d);
  }
  SUBCASE("compensation cancels rotation") {
    auto s = constant_depol(1, 0.0);
    s.misalignment[0] = 0.2;
    ControlState c = ctrl;
    CHECK(effective_link(link, s, c, kBb84, 0).e_d ==
          Approx(link.e_d + std::pow(std::sin(0.2), 2)).epsilon(1e-12));
    c.theta_c = 0.2;
    CHECK(effective_link(link, s, c, kBb84, 0).e_d == Approx(link.e_d).epsilon(1e-12));
    CHECK(effective_link(link, s, c, kBb84, 0).visibility == Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("COW visibility follows the phase residual") {
    const auto cow = ProtocolConfig::defaults(Protocol::COW);
    ControlState c = ControlState::nominal(cow);
    const auto s = constant_depol(1, 0.0);
    const auto eff = effective_link(link, s, c, cow, 0, 0.3);
    CHECK(eff.visibility == Approx(std::exp(-2.0 * c.mu_s * (1.0 - std::cos(0.3)))));
    c.phi_c = 0.3;
    CHECK(effective_link(link, s, c, cow, 0, 0.3).visibility == Approx(1.0));
  }
  SUBCASE("visibility dip affects only its block") {
    auto s = constant_depol(3, 0.0);
    s.events.push_back({1, EventKind::VisibilityDip, 0.2});
    CHECK(effective_link(link, s, ctrl, kBb84, 0).visibility == Approx(1.0));
    CHECK(effective_link(link, s, ctrl, kBb84, 1).visibility == Approx(0.8));
    CHECK(effective_link(link, s, ctrl, kBb84, 2).visibility == Approx(1.0));
  }
}

TEST_CASE("wilson interval") {
  const auto pts = testing::load_oracle_points();
  const auto w = wilson_interval(30, 1000, 0.95);
  CHECK(w.lo == Approx(pts.at("wilson_30_1000_lo")).epsilon(1e-9));
  CHECK(w.hi == Approx(pts.at("wilson_30_1000_hi")).epsilon(1e-9));
  CHECK(wilson_interval(0, 100).lo == 0.0);
  CHECK(wilson_interval(100, 100).hi == 1.0);
  const auto full = wilson_interval(0, 0);
  CHECK(full.lo == 0.0);
  CHECK(full.hi == 1.0);
  CHECK_THROWS_AS(wilson_interval(5, 4), std::invalid_argument);
}

TEST_CASE("wilson coverage at n = 1000, p = 0.03") {
  CounterRng rng(11);
  std::binomial_distribution<std::uint64_t> dist(1000, 0.03);
  int covered = 0;
  for (int i = 0; i < 500; ++i) {
    const auto w = wilson_interval(dist(rng), 1000);
    covered += (w.lo <= 0.03 && 0.03 <= w.hi);
  }
  CHECK(covered >= 465);
}

TEST_CASE("dark channel gives the degenerate block") {
  LinkParams link;
  link.eta_det = 0.0;
  link.y0 = 0.0;
  AbortRule abort;
  CounterRng rng(3);
  const auto t = step_block(link, constant_depol(1, 0.0), ControlState::nominal(kBb84), kBb84, 0,
                            rng, abort);
  CHECK(t.n_sifted == 0);
  CHECK(t.n_errors == 0);
  CHECK(t.e_mu_hat == 0.5);
  CHECK(t.e_lo == 0.0);
  CHECK(t.e_hi == 1.0);
}

TEST_CASE("gain estimate concentrates at 1e6 pulses, 50 km") {
  LinkParams link;
  link.distance_km = 50.0;
  AbortRule abort;
  CounterRng rng(1);
  const auto t = step_block(link, constant_depol(1, 0.0), ControlState::nominal(kBb84), kBb84, 0,
                            rng, abort);
  const double trials = 1e6 * kBb84.bb84.p_s * kBb84.q;
  const double q = t.model_q_mu;
  CHECK(q == Approx(bb84_model_gains(link, kBb84.bb84.mu_s).q_mu).epsilon(1e-12));
  const double sigma = std::sqrt(q * (1.0 - q) / trials);
  CHECK(std::abs(t.q_mu_hat - q) <= 5.0 * sigma);
}

TEST_CASE("telemetry invariants hold across scenarios and protocols") {
  for (auto kind : {Protocol::BB84Decoy, Protocol::E91, Protocol::COW}) {
    const auto proto = ProtocolConfig::defaults(kind);
    ChannelSimulator sim(LinkParams{}, make_scenario({"noise-sweep", 120}), proto, 5);
    const auto ctrl = ControlState::nominal(proto);
    while (!sim.done()) {
      const auto t = sim.step(ctrl);
      CHECK(t.n_errors <= t.n_sifted);
      CHECK(t.n_sifted <= t.n_pulses);
      CHECK(t.e_lo <= t.e_mu_hat);
      CHECK(t.e_mu_hat <= t.e_hi);
      for (double v : {t.q_mu_hat, t.e_mu_hat, t.e_lo, t.e_hi, t.v_hat, t.y0_hat, t.eta_hat})
        CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("same seed gives identical telemetry") {
  auto run = [](std::uint64_t seed) {
    ChannelSimulator sim(LinkParams{}, make_scenario({"noise-sweep", 60}),
                         ProtocolConfig::defaults(Protocol::COW), seed);
    std::vector<Telemetry> out;
    const auto ctrl = ControlState::nominal(sim.protocol());
    while (!sim.done()) out.push_back(sim.step(ctrl));
    return out;
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("telemetry before an event matches the event-free run") {
  auto with_event = make_scenario({"nominal", 80});
  with_event.events.push_back({50, EventKind::StepDarkCounts, 1e-4});
  const auto plain = make_scenario({"nominal", 50});
  ChannelSimulator a(LinkParams{}, with_event, kBb84, 9);
  ChannelSimulator b(LinkParams{}, plain, kBb84, 9);
  const auto ctrl = ControlState::nominal(kBb84);
  while (!b.done()) CHECK(a.step(ctrl) == b.step(ctrl));
  CHECK(a.step(ctrl).y0_hat > 0.0);
}

TEST_CASE("model QBER is non-decreasing in depolarization") {
  const LinkParams link;
  for (auto kind : {Protocol::BB84Decoy, Protocol::E91, Protocol::COW}) {
    const auto proto = ProtocolConfig::defaults(kind);
    const auto ctrl = ControlState::nominal(proto);
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
      const double p = i / 100.0;
      AbortRule abort;
      CounterRng rng(1);
      const auto t = step_block(link, constant_depol(1, p), ctrl, proto, 0, rng, abort);
      CHECK(t.model_e_mu >= prev);
      prev = t.model_e_mu;
    }
  }
}

TEST_CASE("QBER interval covers the model value at 1e7 pulses") {
  LinkParams link;
  SimOptions opts;
  opts.n_pulses = 10'000'000;
  const auto sched = constant_depol(1, 0.05);
  const auto ctrl = ControlState::nominal(kBb84);
  int covered = 0;
  double model = 0.0;
  for (int i = 0; i < 500; ++i) {
    AbortRule abort;
    CounterRng rng = CounterRng(1000).split(static_cast<std::uint64_t>(i));
    const auto t = step_block(link, sched, ctrl, kBb84, 0, rng, abort, opts);
    model = t.model_e_mu;
    covered += (t.e_lo <= model && model <= t.e_hi);
  }
  CHECK(covered >= 465);
}

TEST_CASE("estimator error shrinks with block size") {
  const auto sched = constant_depol(1, 0.05);
  const auto ctrl = ControlState::nominal(kBb84);
  auto mean_abs_err = [&](std::uint64_t n) {
    SimOptions opts;
    opts.n_pulses = n;
    double sum = 0.0;
    for (int i = 0; i < 200; ++i) {
      AbortRule abort;
      CounterRng rng = CounterRng(77).split(static_cast<std::uint64_t>(i));
      const auto t = step_block(LinkParams{}, sched, ctrl, kBb84, 0, rng, abort, opts);
      sum += std::abs(t.e_mu_hat - t.model_e_mu);
    }
    return sum / 200.0;
  };
  CHECK(mean_abs_err(10'000'000) < 0.5 * mean_abs_err(100'000));
}

TEST_CASE("bit-level sampler agrees with the binomial shortcut") {
  LinkParams link;
  link.distance_km = 5.0;
  const auto sched = constant_depol(1, 0.04);
  const auto ctrl = ControlState::nominal(kBb84);
  const auto eff = effective_link(link, sched, ctrl, kBb84, 0);
  const ChannelPoint point{eff.eta, eff.y0, eff.e_d, link.e0};
  const auto g = bb84_model_gains(point, ctrl.mu_s);

  const std::uint64_t n = 100'000;
  std::uint64_t sifted = 0, errors = 0;
  const int reps = 10;
  for (int i = 0; i < reps; ++i) {
    CounterRng rng = CounterRng(5).split(static_cast<std::uint64_t>(i));
    const auto c = bit_level_block(eff, ctrl.mu_s, n, rng, link.e0);
    sifted += c.n_sifted;
    errors += c.n_errors;
  }
  const double trials = 0.5 * static_cast<double>(n) * reps;
  const double q_hat = static_cast<double>(sifted) / trials;
  const double e_hat = static_cast<double>(errors) / static_cast<double>(sifted);
  CHECK(std::abs(q_hat - g.q_mu) <= 5.0 * std::sqrt(g.q_mu * (1 - g.q_mu) / trials));
  CHECK(std::abs(e_hat - g.e_mu) <=
        5.0 * std::sqrt(g.e_mu * (1 - g.e_mu) / static_cast<double>(sifted)));
  CounterRng rng(1);
  CHECK_THROWS_AS(bit_level_block(eff, 0.5, 200'000, rng), std::invalid_argument);
}

TEST_CASE("abort rule needs two consecutive exceedances") {
  AbortRule r(0.11);
  CHECK_FALSE(r.update(0.2));
  CHECK(r.update(0.2));
  CHECK_FALSE(r.update(0.05));
  CHECK_FALSE(r.update(0.12));
  CHECK(r.update(0.12));
}

TEST_CASE("forced-high-qber aborts from the second block") {
  ChannelSimulator sim(LinkParams{}, make_scenario({"forced-high-qber", 5}), kBb84, 1);
  const auto ctrl = ControlState::nominal(kBb84);
  CHECK_FALSE(sim.step(ctrl).aborted);
  for (int i = 1; i < 5; ++i) CHECK(sim.step(ctrl).aborted);
}

TEST_CASE("telemetry CSV") {
  ChannelSimulator sim(LinkParams{}, make_scenario({"nominal", 6}), kBb84, 2);
  std::vector<Telemetry> rows;
  const auto ctrl = ControlState::nominal(kBb84);
  while (!sim.done()) rows.push_back(sim.step(ctrl));
  std::stringstream ss;
  write_telemetry_csv(ss, rows);
  std::string header;
  std::getline(ss, header);
  CHECK(header == kTelemetryCsvHeader);
  std::string first;
  std::getline(ss, first);
  CHECK(std::count(first.begin(), first.end(), ',') == 10);
  ss.seekg(0);
  const auto back = read_telemetry_csv(ss);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].n_sifted == rows[i].n_sifted);
    CHECK(back[i].e_mu_hat == Approx(rows[i].e_mu_hat).epsilon(1e-9));
    CHECK(back[i].eta_hat == Approx(rows[i].eta_hat).epsilon(1e-9));
  }
  CHECK(format_sig10(0.1234567890123) == "0.123456789");
  std::stringstream bad("nope\n1,2,3\n");
  CHECK_THROWS(read_telemetry_csv(bad));
}
