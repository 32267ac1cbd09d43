#include "qkd/rates.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qkd {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace

void LinkParams::validate() const {
  require(alpha_db_per_km >= 0.0, "alpha_db_per_km must be >= 0");
  require(distance_km >= 0.0, "distance_km must be >= 0");
  require(eta_det > 0.0 && eta_det <= 1.0, "eta_det must lie in (0,1]");
  require(y0 >= 0.0 && y0 < 1.0, "y0 must lie in [0,1)");
  require(e_d >= 0.0 && e_d <= 0.5, "e_d must lie in [0,0.5]");
  require(e0 >= 0.0 && e0 <= 1.0, "e0 must lie in [0,1]");
  require(f_rep > 0.0, "f_rep must be > 0");
  require(std::isfinite(theta), "theta must be finite");
}

ChannelPoint channel_point(const LinkParams& link) {
  return {transmittance(link), link.y0, link.e_d, link.e0};
}

std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::BB84Decoy: return "bb84";
    case Protocol::E91: return "e91";
    case Protocol::COW: return "cow";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "bb84") return Protocol::BB84Decoy;
  if (name == "e91") return Protocol::E91;
  if (name == "cow") return Protocol::COW;
  throw std::invalid_argument("unknown protocol '" + std::string(name) + "'");
}

ProtocolConfig ProtocolConfig::defaults(Protocol kind) {
  ProtocolConfig cfg;
  cfg.kind = kind;
  switch (kind) {
    case Protocol::BB84Decoy:
    case Protocol::E91: cfg.q = 0.5; break;
    case Protocol::COW: cfg.q = 0.9 * (1.0 - cfg.cow.monitor_fraction); break;
  }
  return cfg;
}

void ProtocolConfig::validate() const {
  require(q > 0.0 && q <= 1.0, "q must lie in (0,1]");
  require(f_ec >= 1.0, "f_ec must be >= 1");
  require(bb84.mu_w > 0.0 && bb84.mu_w < bb84.mu_s, "need 0 < mu_w < mu_s");
  require(bb84.p_s > 0.0 && bb84.p_s < 1.0, "p_s must lie in (0,1)");
  require(e91.v_source > 0.0 && e91.v_source <= 1.0, "v_source must lie in (0,1]");
  require(e91.mu_pair > 0.0, "mu_pair must be > 0");
  require(cow.alpha_sq > 0.0, "alpha_sq must be > 0");
  require(cow.monitor_fraction >= 0.0 && cow.monitor_fraction < 1.0,
          "monitor_fraction must lie in [0,1)");
  require(finite_key.n_block >= 1.0, "n_block must be >= 1");
  require(finite_key.epsilon > 0.0 && finite_key.epsilon < 1.0, "epsilon must lie in (0,1)");
}

double binary_entropy(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("binary_entropy: argument outside [0,1]");
  if (x == 0.0 || x == 1.0) return 0.0;
  return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

double transmittance(const LinkParams& link) {
  return std::pow(10.0, -link.alpha_db_per_km * link.distance_km / 10.0) * link.eta_det;
}

GainStats bb84_model_gains(const ChannelPoint& ch, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("bb84_model_gains: mu must be > 0");
  GainStats g;
  const double y1 = std::min(1.0, ch.y0 + ch.eta);
  const double p1 = mu * std::exp(-mu);
  g.y1 = y1;
  g.q1 = y1 * p1;
  g.e1 = y1 > 0.0 ? (ch.e0 * ch.y0 + ch.e_d * ch.eta) / y1 : 0.5;

  // Summed smallest terms last would be nicer, but the Poisson weights decay
  // fast enough for mu <= 1 that ascending order loses nothing measurable.
  double weight = std::exp(-mu);
  double transmit_miss = 1.0;  // (1-eta)^n
  double gain = 0.0;
  double err = 0.0;
  for (int n = 0; n <= kPhotonCutoff; ++n) {
    if (n > 0) {
      weight *= mu / n;
      transmit_miss *= 1.0 - ch.eta;
    }
    const double yn = std::min(1.0, ch.y0 + 1.0 - transmit_miss);
    gain += weight * yn;
    err += weight * (ch.e0 * ch.y0 + ch.e_d * (1.0 - transmit_miss));
  }
  g.q_mu = gain;
  g.e_mu = gain > 0.0 ? err / gain : 0.5;
  return g;
}

GainStats bb84_model_gains(const LinkParams& link, double mu) {
  return bb84_model_gains(channel_point(link), mu);
}

GainStats bb84_model_gains_closed_form(const ChannelPoint& ch, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("bb84_model_gains: mu must be > 0");
  GainStats g;
  g.y1 = std::min(1.0, ch.y0 + ch.eta);
  g.q1 = g.y1 * mu * std::exp(-mu);
  g.e1 = g.y1 > 0.0 ? (ch.e0 * ch.y0 + ch.e_d * ch.eta) / g.y1 : 0.5;
  const double detect = -std::expm1(-ch.eta * mu);
  g.q_mu = ch.y0 + detect;
  g.e_mu = g.q_mu > 0.0 ? (ch.e0 * ch.y0 + ch.e_d * detect) / g.q_mu : 0.5;
  return g;
}

DecoyBounds decoy_bounds(Observation signal, Observation weak, const ProtocolConfig& cfg,
                         double y0, double e0) {
  const double mu = cfg.bb84.mu_s;
  const double nu = cfg.bb84.mu_w;
  if (!(nu > 0.0 && nu < mu)) throw std::invalid_argument("decoy_bounds: need 0 < mu_w < mu_s");

  const double y1 = mu / (mu * nu - nu * nu) *
                    (weak.gain * std::exp(nu) - signal.gain * std::exp(mu) * (nu * nu) / (mu * mu) -
                     (mu * mu - nu * nu) / (mu * mu) * y0);
  if (!(y1 > 0.0)) throw BoundInfeasible("decoy_bounds: single-photon yield bound is not positive");

  DecoyBounds b;
  b.y1_lower = std::min(1.0, y1);
  b.q1_lower = b.y1_lower * mu * std::exp(-mu);
  const double e1 = (weak.qber * weak.gain * std::exp(nu) - e0 * y0) / (b.y1_lower * nu);
  b.e1_upper = std::clamp(e1, 0.0, 0.5);
  return b;
}

double finite_key_penalty(double n_block, double epsilon) {
  if (!(n_block >= 1.0)) throw std::invalid_argument("finite_key_penalty: n_block must be >= 1");
  if (!(epsilon > 0.0 && epsilon < 1.0))
    throw std::invalid_argument("finite_key_penalty: epsilon must lie in (0,1)");
  if (std::isinf(n_block)) return 0.0;
  return 7.0 * std::sqrt(std::log2(2.0 / epsilon) / n_block) +
         (2.0 / n_block) * std::log2(1.0 / epsilon);
}

double finite_key_rate(double r_asym, double n_block, double epsilon) {
  return std::max(0.0, r_asym - finite_key_penalty(n_block, epsilon));
}

void finalize_report(KeyRateReport& rep, const ProtocolConfig& cfg, double f_rep) {
  rep.r_per_pulse = std::max(0.0, rep.components.raw);
  rep.r_bps = rep.r_per_pulse * f_rep;
  rep.r_finite = finite_key_rate(rep.r_per_pulse, cfg.finite_key.n_block, cfg.finite_key.epsilon);
}

namespace {

// q * { -Q f H2(E) + Q1 [1 - H2(e1)] }
KeyRateReport devetak_winter(double q_mu, double e_mu, double q1, double e1,
                             const ProtocolConfig& cfg, double f_rep) {
  KeyRateReport rep;
  rep.components.ec_leak = cfg.q * q_mu * cfg.f_ec * binary_entropy(clamp01(e_mu));
  rep.components.pa_term = cfg.q * q1 * (1.0 - binary_entropy(clamp01(e1)));
  rep.components.raw = rep.components.pa_term - rep.components.ec_leak;
  finalize_report(rep, cfg, f_rep);
  return rep;
}

}  // namespace

KeyRateReport bb84_key_rate(const DecoyBounds& bounds, double q_mu, double e_mu,
                            const ProtocolConfig& cfg, double f_rep) {
  return devetak_winter(q_mu, e_mu, bounds.q1_lower, bounds.e1_upper, cfg, f_rep);
}

KeyRateReport bb84_key_rate(const GainStats& gains, const ProtocolConfig& cfg, double f_rep) {
  return devetak_winter(gains.q_mu, gains.e_mu, gains.q1, gains.e1, cfg, f_rep);
}

double bb84_sifted_rate(double q_mu, double e_mu, double q) {
  return q * q_mu * (1.0 - 2.0 * binary_entropy(e_mu));
}

ChshPoint e91_quantities(double visibility) {
  if (!(visibility >= 0.0 && visibility <= 1.0))
    throw DomainError("e91_quantities: visibility outside [0,1]");
  return {2.0 * std::numbers::sqrt2 * visibility, (1.0 - visibility) / 2.0};
}

double e91_bracket(double s, double qber, double f_ec) {
  const double half = s / 2.0;
  const double excess = std::sqrt(std::max(0.0, half * half - 1.0));
  // Rounding can push (1 + excess)/2 a hair above 1 at S = 2 sqrt 2.
  const double holevo_arg = std::min(1.0, (1.0 + excess) / 2.0);
  return 1.0 - f_ec * binary_entropy(clamp01(qber)) - binary_entropy(holevo_arg);
}

KeyRateReport e91_key_rate(double s, double qber, const ProtocolConfig& cfg, double f_rep,
                           double coincidence_gain) {
  KeyRateReport rep;
  rep.components.ec_leak = cfg.q * coincidence_gain * cfg.f_ec * binary_entropy(clamp01(qber));
  rep.components.raw = cfg.q * coincidence_gain * e91_bracket(s, qber, cfg.f_ec);
  rep.components.pa_term = rep.components.raw + rep.components.ec_leak;
  finalize_report(rep, cfg, f_rep);
  return rep;
}

CowVisibility cow_visibility(double alpha_sq, double phase_drift) {
  if (!(alpha_sq >= 0.0)) throw std::invalid_argument("cow_visibility: alpha_sq must be >= 0");
  const double v = std::exp(-2.0 * alpha_sq * (1.0 - std::cos(phase_drift)));
  return {v, (1.0 - v) / 2.0};
}

KeyRateReport cow_key_rate(double q_mu, double e_mu, double e_ph, const ProtocolConfig& cfg,
                           double f_rep) {
  return devetak_winter(q_mu, e_mu, q_mu, e_ph, cfg, f_rep);
}

ProtocolModel evaluate_protocol(const ChannelPoint& ch, const ProtocolConfig& cfg,
                                const ModelInputs& in, double f_rep) {
  ProtocolModel m;
  switch (cfg.kind) {
    case Protocol::BB84Decoy: {
      ProtocolConfig local = cfg;
      local.bb84.mu_s = in.intensity;
      local.bb84.mu_w = in.weak_intensity;
      const GainStats s = bb84_model_gains(ch, in.intensity);
      const GainStats w = bb84_model_gains(ch, in.weak_intensity);
      m.q_mu = s.q_mu;
      m.e_mu = s.e_mu;
      m.visibility = 1.0 - 2.0 * s.e_mu;
      m.weak = {w.q_mu, w.e_mu};
      try {
        const DecoyBounds b = decoy_bounds({s.q_mu, s.e_mu}, m.weak, local, ch.y0, ch.e0);
        m.report = bb84_key_rate(b, s.q_mu, s.e_mu, local, f_rep);
      } catch (const BoundInfeasible&) {
        m.report = KeyRateReport{};
      }
      break;
    }
    case Protocol::E91: {
      // Source visibility and channel errors combine into the error of a
      // genuine coincidence; accidentals from Y0 dilute it further.
      ChannelPoint pair = ch;
      pair.e_d = (1.0 - cfg.e91.v_source * in.visibility_factor * (1.0 - 2.0 * ch.e_d)) / 2.0;
      const GainStats g = bb84_model_gains(pair, in.intensity);
      m.q_mu = g.q_mu;
      m.e_mu = g.e_mu;
      m.visibility = clamp01(1.0 - 2.0 * g.e_mu);
      const ChshPoint chsh = e91_quantities(m.visibility);
      m.report = e91_key_rate(chsh.s, chsh.qber, cfg, f_rep, g.q_mu);
      break;
    }
    case Protocol::COW: {
      const GainStats g = bb84_model_gains(ch, in.intensity);
      const CowVisibility v = cow_visibility(in.intensity, in.phase_drift);
      m.q_mu = g.q_mu;
      m.e_mu = g.e_mu;
      m.visibility = v.visibility;
      m.report = cow_key_rate(g.q_mu, g.e_mu, v.phase_error, cfg, f_rep);
      break;
    }
  }
  return m;
}

ProtocolModel evaluate_protocol(const LinkParams& link, const ProtocolConfig& cfg,
                                double phase_drift) {
  ModelInputs in;
  switch (cfg.kind) {
    case Protocol::BB84Decoy:
      in.intensity = cfg.bb84.mu_s;
      in.weak_intensity = cfg.bb84.mu_w;
      break;
    case Protocol::E91: in.intensity = cfg.e91.mu_pair; break;
    case Protocol::COW: in.intensity = cfg.cow.alpha_sq; break;
  }
  in.phase_drift = phase_drift;
  return evaluate_protocol(channel_point(link), cfg, in, link.f_rep);
}

}  // namespace qkd
