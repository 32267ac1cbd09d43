#include "qkd/channel.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <charconv>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace qkd {

namespace {

double at_or_last(const std::vector<double>& v, int t) {
  if (v.empty()) return 0.0;
  return v[static_cast<std::size_t>(std::clamp(t, 0, static_cast<int>(v.size()) - 1))];
}

template <typename F>
double accumulate_events(const std::vector<NoiseEvent>& events, EventKind kind, int t, F&& pred) {
  double total = 0.0;
  for (const auto& e : events)
    if (e.kind == kind && pred(e.block_index, t)) total += e.magnitude;
  return total;
}

bool from_block(int idx, int t) { return idx <= t; }
bool at_block(int idx, int t) { return idx == t; }

std::uint64_t binomial(CounterRng& rng, std::uint64_t trials, double p) {
  if (trials == 0 || p <= 0.0) return 0;
  if (p >= 1.0) return trials;
  std::binomial_distribution<std::uint64_t> dist(trials, p);
  return dist(rng);
}

double intensity_for(const ProtocolConfig& proto, const ControlState& ctrl) {
  return proto.kind == Protocol::E91 ? proto.e91.mu_pair : ctrl.mu_s;
}

}  // namespace

void NoiseSchedule::validate() const {
  const auto n = depol_p.size();
  if (damp_gamma.size() != n || misalignment.size() != n || stress_level.size() != n)
    throw std::invalid_argument("NoiseSchedule: series lengths differ");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(depol_p[i] >= 0.0 && depol_p[i] <= 1.0))
      throw std::invalid_argument("NoiseSchedule: depol_p outside [0,1]");
    if (!(damp_gamma[i] >= 0.0 && damp_gamma[i] <= 1.0))
      throw std::invalid_argument("NoiseSchedule: damp_gamma outside [0,1]");
  }
  for (std::size_t i = 1; i < events.size(); ++i)
    if (events[i].block_index <= events[i - 1].block_index)
      throw std::invalid_argument("NoiseSchedule: event blocks must be strictly increasing");
}

double NoiseSchedule::depol(int t) const {
  return std::clamp(at_or_last(depol_p, t) + accumulate_events(events, EventKind::StepDepol, t, from_block),
                    0.0, 1.0);
}
double NoiseSchedule::gamma(int t) const { return at_or_last(damp_gamma, t); }
double NoiseSchedule::tilt(int t) const { return at_or_last(misalignment, t); }
double NoiseSchedule::loss_db(int t) const {
  return accumulate_events(events, EventKind::StepLossDb, t, from_block);
}
double NoiseSchedule::extra_y0(int t) const {
  return accumulate_events(events, EventKind::StepDarkCounts, t, from_block);
}
double NoiseSchedule::visibility_dip(int t) const {
  return std::clamp(accumulate_events(events, EventKind::VisibilityDip, t, at_block), 0.0, 1.0);
}

std::vector<std::string> scenario_names() {
  return {"nominal", "noise-sweep", "splice-3db", "sinusoid", "train-mix", "forced-high-qber",
          "explicit"};
}

NoiseSchedule make_scenario(const ScenarioSpec& spec) {
  if (spec.blocks < 1) throw std::invalid_argument("make_scenario: blocks must be >= 1");
  const auto n = static_cast<std::size_t>(spec.blocks);
  NoiseSchedule s;
  s.name = spec.name;
  s.depol_p.assign(n, 0.0);
  s.damp_gamma.assign(n, 0.0);
  s.misalignment.assign(n, 0.0);
  s.stress_level.assign(n, 0.0);

  auto apply_level = [&](std::size_t t, double level) {
    s.stress_level[t] = level;
    s.depol_p[t] = kSweepDepolPerLevel * level;
    s.misalignment[t] = kSweepBaseTilt + kSweepTiltPerLevel * level;
  };

  if (spec.name == "nominal") {
  } else if (spec.name == "noise-sweep") {
    for (std::size_t t = 0; t < n; ++t) {
      const auto seg = std::min<std::size_t>(kSweepLevels - 1, t * kSweepLevels / n);
      apply_level(t, 0.1 * static_cast<double>(seg));
    }
  } else if (spec.name == "splice-3db") {
    s.events.push_back({spec.blocks / 2, EventKind::StepLossDb, 3.0});
  } else if (spec.name == "sinusoid") {
    for (std::size_t t = 0; t < n; ++t) {
      const double level = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * t / 8.0);
      s.stress_level[t] = level;
      s.depol_p[t] = 0.02 + 0.12 * level;
      s.damp_gamma[t] = 0.2 * level;
    }
  } else if (spec.name == "train-mix") {
    CounterRng rng = CounterRng(spec.seed).split("train-mix");
    std::size_t t = 0;
    int next_loss = 0;
    while (t < n) {
      const auto len = static_cast<std::size_t>(40 + rng() % 121);
      const double level = 0.5 * rng.uniform();
      // A quarter of the segments carry no polarization rotation.
      const bool aligned = rng.uniform() < 0.25;
      for (std::size_t k = 0; k < len && t < n; ++k, ++t) {
        apply_level(t, level);
        if (aligned) s.misalignment[t] = 0.0;
      }
      if (t < n && static_cast<int>(t) > next_loss && rng.uniform() < 0.25) {
        s.events.push_back({static_cast<int>(t), EventKind::StepLossDb, 1.0 + 2.0 * rng.uniform()});
        next_loss = static_cast<int>(t);
      }
    }
  } else if (spec.name == "forced-high-qber") {
    s.depol_p.assign(n, 0.4);
  } else if (spec.name == "explicit") {
    if (spec.depol_series.size() != n)
      throw std::invalid_argument("make_scenario: explicit series length must equal blocks");
    s.depol_p = spec.depol_series;
  } else {
    throw std::invalid_argument("unknown scenario '" + spec.name + "'");
  }
  s.validate();
  return s;
}

ControlState ControlState::nominal(const ProtocolConfig& cfg) {
  ControlState c;
  switch (cfg.kind) {
    case Protocol::BB84Decoy:
      c.mu_s = cfg.bb84.mu_s;
      c.mu_w = cfg.bb84.mu_w;
      break;
    case Protocol::E91:
      c.mu_s = cfg.e91.mu_pair;
      c.mu_w = cfg.bb84.mu_w;
      break;
    case Protocol::COW:
      c.mu_s = cfg.cow.alpha_sq;
      c.mu_w = cfg.bb84.mu_w;
      break;
  }
  return c;
}

EffectiveLink effective_link(const LinkParams& link, const NoiseSchedule& sched,
                             const ControlState& ctrl, const ProtocolConfig& proto, int t,
                             double phase_drift) {
  const double p = sched.depol(t);
  const double dip = sched.visibility_dip(t);
  EffectiveLink eff;
  eff.eta = transmittance(link) * std::pow(10.0, -sched.loss_db(t) / 10.0) * (1.0 - sched.gamma(t));
  eff.y0 = std::min(1.0, link.y0 + sched.extra_y0(t));
  if (proto.kind == Protocol::COW) {
    eff.phase_residual = phase_drift - ctrl.phi_c;
    eff.visibility = cow_visibility(ctrl.mu_s, eff.phase_residual).visibility;
    eff.e_d = link.e_d + p / 2.0;
  } else {
    const double rot = link.theta + sched.tilt(t) - ctrl.theta_c;
    const double c = std::cos(rot);
    eff.visibility = (1.0 - p) * c * c;
    const double s = std::sin(rot);
    eff.e_d = link.e_d + s * s + p / 2.0;
  }
  eff.visibility *= 1.0 - dip;
  eff.e_d = std::min(0.5, eff.e_d + dip / 2.0);
  return eff;
}

WilsonInterval wilson_interval(std::uint64_t n_err, std::uint64_t n, double confidence) {
  if (n == 0) return {0.0, 1.0};
  if (n_err > n) throw std::invalid_argument("wilson_interval: n_err > n");
  if (!(confidence > 0.0 && confidence < 1.0))
    throw std::invalid_argument("wilson_interval: confidence must lie in (0,1)");
  const double z =
      boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + confidence / 2.0);
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(n_err) / nn;
  const double z2 = z * z;
  const double den = 1.0 + z2 / nn;
  const double centre = (p + z2 / (2.0 * nn)) / den;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / den;
  WilsonInterval w{std::max(0.0, centre - half), std::min(1.0, centre + half)};
  if (n_err == 0) w.lo = 0.0;
  if (n_err == n) w.hi = 1.0;
  return w;
}

Telemetry step_block(const LinkParams& link, const NoiseSchedule& sched, const ControlState& ctrl,
                     const ProtocolConfig& proto, int t, CounterRng& rng, AbortRule& abort,
                     const SimOptions& opts, double phase_drift) {
  const EffectiveLink eff = effective_link(link, sched, ctrl, proto, t, phase_drift);
  const ChannelPoint point{eff.eta, eff.y0, eff.e_d, link.e0};
  const double mu = intensity_for(proto, ctrl);

  ModelInputs in;
  in.intensity = mu;
  in.weak_intensity = ctrl.mu_w;
  in.phase_drift = eff.phase_residual;
  const ProtocolModel model = evaluate_protocol(point, proto, in, link.f_rep);

  Telemetry tel;
  tel.block = t;
  tel.n_pulses = opts.n_pulses;
  tel.model_q_mu = model.q_mu;
  tel.model_e_mu = model.e_mu;
  tel.model_visibility = eff.visibility;

  const double npulses = static_cast<double>(opts.n_pulses);
  const double signal_share = proto.kind == Protocol::BB84Decoy ? proto.bb84.p_s : 1.0;
  const auto trials = static_cast<std::uint64_t>(std::llround(npulses * signal_share * proto.q));

  tel.n_sifted = binomial(rng, trials, model.q_mu);
  tel.n_errors = binomial(rng, tel.n_sifted, model.e_mu);
  tel.q_mu_hat = trials > 0 ? static_cast<double>(tel.n_sifted) / static_cast<double>(trials) : 0.0;
  if (tel.n_sifted > 0) {
    tel.e_mu_hat = static_cast<double>(tel.n_errors) / static_cast<double>(tel.n_sifted);
    const WilsonInterval w = wilson_interval(tel.n_errors, tel.n_sifted, opts.confidence);
    tel.e_lo = std::min(w.lo, tel.e_mu_hat);
    tel.e_hi = std::max(w.hi, tel.e_mu_hat);
  } else {
    tel.e_mu_hat = 0.5;
    tel.e_lo = 0.0;
    tel.e_hi = 1.0;
  }

  if (proto.kind == Protocol::BB84Decoy) {
    const auto weak_trials =
        static_cast<std::uint64_t>(std::llround(npulses * (1.0 - proto.bb84.p_s) * proto.q));
    const auto n_w = binomial(rng, weak_trials, model.weak.gain);
    const auto err_w = binomial(rng, n_w, model.weak.qber);
    tel.q_w_hat = weak_trials > 0 ? static_cast<double>(n_w) / static_cast<double>(weak_trials) : 0.0;
    tel.e_w_hat = n_w > 0 ? static_cast<double>(err_w) / static_cast<double>(n_w) : 0.5;
  }

  // Interference visibility: dark-port clicks among monitored detections.
  std::uint64_t monitored = tel.n_sifted;
  if (proto.kind == Protocol::COW) {
    const auto mon_trials =
        static_cast<std::uint64_t>(std::llround(npulses * proto.cow.monitor_fraction));
    monitored = binomial(rng, mon_trials, model.q_mu);
  }
  const auto dark_port = binomial(rng, monitored, std::clamp((1.0 - eff.visibility) / 2.0, 0.0, 1.0));
  tel.v_hat = monitored > 0
                  ? std::clamp(1.0 - 2.0 * static_cast<double>(dark_port) / static_cast<double>(monitored),
                               0.0, 1.0)
                  : 0.0;

  tel.y0_hat = static_cast<double>(binomial(rng, opts.n_pulses, eff.y0)) / npulses;
  const double signal_clicks = std::clamp(tel.q_mu_hat - tel.y0_hat, 0.0, 1.0 - 1e-15);
  tel.eta_hat = std::clamp(-std::log1p(-signal_clicks) / mu, 0.0, 1.0);

  tel.aborted = abort.update(tel.e_mu_hat);
  return tel;
}

ChannelSimulator::ChannelSimulator(LinkParams link, NoiseSchedule sched, ProtocolConfig proto,
                                   std::uint64_t seed, SimOptions opts)
    : link_(link),
      sched_(std::move(sched)),
      proto_(proto),
      opts_(opts),
      root_(CounterRng(seed).split("channel")),
      abort_(opts.abort_threshold) {
  link_.validate();
  proto_.validate();
  sched_.validate();
}

Telemetry ChannelSimulator::step(const ControlState& ctrl) {
  if (done()) throw std::out_of_range("ChannelSimulator: schedule exhausted");
  if (block_ > 0) {
    CounterRng walk = root_.split("phase").split(static_cast<std::uint64_t>(block_));
    const auto& pd = sched_.phase_drift;
    phase_ = std::clamp((1.0 - pd.reversion) * phase_ + pd.step * walk.normal(), -pd.bound, pd.bound);
  }
  CounterRng rng = root_.split("block").split(static_cast<std::uint64_t>(block_));
  Telemetry t = step_block(link_, sched_, ctrl, proto_, block_, rng, abort_, opts_, phase_);
  ++block_;
  return t;
}

BitLevelCounts bit_level_block(const EffectiveLink& eff, double mu, std::uint64_t n_pulses,
                               CounterRng& rng, double e0) {
  if (n_pulses > 100'000) throw std::invalid_argument("bit_level_block: at most 1e5 pulses");
  BitLevelCounts c;
  std::poisson_distribution<int> photons(mu);
  for (std::uint64_t i = 0; i < n_pulses; ++i) {
    const bool alice_basis = rng() & 1U;
    const bool bob_basis = rng() & 1U;
    const bool bit = rng() & 1U;
    const int n = photons(rng);
    bool signal_click = false;
    for (int k = 0; k < n && !signal_click; ++k) signal_click = rng.uniform() < eff.eta;
    const bool dark_click = rng.uniform() < eff.y0;
    if (!signal_click && !dark_click) continue;
    if (alice_basis != bob_basis) continue;
    ++c.n_sifted;
    // A signal photon errs with the alignment probability; a pure dark count
    // is random.
    const double p_err = signal_click ? eff.e_d : e0;
    const bool bob_bit = (rng.uniform() < p_err) ? !bit : bit;
    if (bob_bit != bit) ++c.n_errors;
  }
  return c;
}

std::string format_sig10(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 10);
  return std::string(buf, res.ptr);
}

void write_telemetry_fields(std::ostream& out, const Telemetry& t) {
  out << t.block << ',' << t.n_pulses << ',' << t.n_sifted << ',' << t.n_errors << ','
      << format_sig10(t.q_mu_hat) << ',' << format_sig10(t.e_mu_hat) << ',' << format_sig10(t.e_lo)
      << ',' << format_sig10(t.e_hi) << ',' << format_sig10(t.v_hat) << ','
      << format_sig10(t.eta_hat) << ',' << (t.aborted ? 1 : 0);
}

void write_telemetry_csv(std::ostream& out, std::span<const Telemetry> rows) {
  out << kTelemetryCsvHeader << '\n';
  for (const auto& t : rows) {
    write_telemetry_fields(out, t);
    out << '\n';
  }
}

std::vector<Telemetry> read_telemetry_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind(kTelemetryCsvHeader, 0) != 0)
    throw std::runtime_error("telemetry CSV: unexpected header");
  std::vector<Telemetry> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 11) throw std::runtime_error("telemetry CSV: short row");
    Telemetry t;
    t.block = std::stoi(cells[0]);
    t.n_pulses = std::stoull(cells[1]);
    t.n_sifted = std::stoull(cells[2]);
    t.n_errors = std::stoull(cells[3]);
    t.q_mu_hat = std::stod(cells[4]);
    t.e_mu_hat = std::stod(cells[5]);
    t.e_lo = std::stod(cells[6]);
    t.e_hi = std::stod(cells[7]);
    t.v_hat = std::stod(cells[8]);
    t.eta_hat = std::stod(cells[9]);
    t.aborted = cells[10] == "1";
    rows.push_back(t);
  }
  return rows;
}

}  // namespace qkd
