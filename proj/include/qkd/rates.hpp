#pragma once

// Analytical key-rate engine for decoy-state BB84, E91 and COW.
//
// Everything in here is a pure function of its arguments. Rates are per
// emitted pulse unless a name says otherwise (`_bps`).

#include <stdexcept>
#include <string>
#include <string_view>

namespace qkd {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when decoy observations cannot be reconciled with any
/// non-negative single-photon yield.
class BoundInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LinkParams {
  double alpha_db_per_km = 0.2;
  double distance_km = 25.0;
  double eta_det = 0.2;
  double y0 = 5e-6;
  double e_d = 0.015;
  double e0 = 0.5;
  double f_rep = 2.5e8;
  double theta = 0.0;  ///< preparation misalignment (rad)

  void validate() const;
};

/// Effective physical state of the link as seen by one protocol run:
/// overall transmittance, background yield and error-model terms.
struct ChannelPoint {
  double eta = 0.0;
  double y0 = 0.0;
  double e_d = 0.0;
  double e0 = 0.5;
};

ChannelPoint channel_point(const LinkParams& link);

enum class Protocol { BB84Decoy, E91, COW };

std::string_view protocol_name(Protocol p);
/// Accepts "bb84", "e91", "cow" (case-sensitive). Throws std::invalid_argument.
Protocol parse_protocol(std::string_view name);

struct Bb84Params {
  double mu_s = 0.5;
  double mu_w = 0.1;
  double p_s = 0.8;
};

struct E91Params {
  double v_source = 0.99;
  double mu_pair = 0.1;  ///< mean pair number per source pulse
};

struct CowParams {
  double alpha_sq = 0.5;
  double monitor_fraction = 0.1;
};

struct FiniteKeyParams {
  double n_block = 1e12;
  double epsilon = 1e-10;
};

struct ProtocolConfig {
  Protocol kind = Protocol::BB84Decoy;
  double q = 0.5;
  double f_ec = 1.16;
  Bb84Params bb84;
  E91Params e91;
  CowParams cow;
  FiniteKeyParams finite_key;

  /// Protocol defaults, including the per-protocol sifting factor.
  static ProtocolConfig defaults(Protocol kind);
  void validate() const;
};

struct GainStats {
  double q_mu = 0.0;
  double e_mu = 0.5;
  double q1 = 0.0;
  double e1 = 0.5;
  double y1 = 0.0;
};

struct DecoyBounds {
  double y1_lower = 0.0;
  double q1_lower = 0.0;
  double e1_upper = 0.5;
};

struct KeyRateReport {
  double r_per_pulse = 0.0;
  double r_bps = 0.0;
  double r_finite = 0.0;
  struct Components {
    double ec_leak = 0.0;   ///< q * Q * f * H2(E), as subtracted
    double pa_term = 0.0;   ///< q * (secret fraction before EC leak)
    double raw = 0.0;       ///< pa_term - ec_leak, unclamped
  } components;
};

/// A measured (gain, QBER) pair at one intensity.
struct Observation {
  double gain = 0.0;
  double qber = 0.0;
};

double binary_entropy(double x);

/// eta = 10^(-alpha*d/10) * eta_det.
double transmittance(const LinkParams& link);

/// Maximum photon number kept in the exact Poisson expansion.
inline constexpr int kPhotonCutoff = 50;

/// Gains and errors from the photon-number expansion
/// Y_n = Y0 + 1 - (1-eta)^n, e_n Y_n = e0 Y0 + e_d (1 - (1-eta)^n),
/// summed under Poisson statistics up to kPhotonCutoff.
GainStats bb84_model_gains(const ChannelPoint& ch, double mu);
GainStats bb84_model_gains(const LinkParams& link, double mu);
/// Fast path: Q = Y0 + 1 - exp(-eta mu), E Q = e0 Y0 + e_d (1 - exp(-eta mu)).
GainStats bb84_model_gains_closed_form(const ChannelPoint& ch, double mu);

/// Two-intensity (signal + weak decoy, known vacuum yield) analytic bounds.
DecoyBounds decoy_bounds(Observation signal, Observation weak, const ProtocolConfig& cfg,
                         double y0, double e0 = 0.5);

double finite_key_penalty(double n_block, double epsilon);
double finite_key_rate(double r_asym, double n_block, double epsilon);

/// GLLP/Devetak-Winter rate with decoy bounds standing in for (Q1, e1).
KeyRateReport bb84_key_rate(const DecoyBounds& bounds, double q_mu, double e_mu,
                            const ProtocolConfig& cfg, double f_rep);
/// Same rate with exact single-photon quantities.
KeyRateReport bb84_key_rate(const GainStats& gains, const ProtocolConfig& cfg, double f_rep);
/// q * Q * [1 - 2 H2(E)], unclamped.
double bb84_sifted_rate(double q_mu, double e_mu, double q);

struct ChshPoint {
  double s = 0.0;
  double qber = 0.5;
};
ChshPoint e91_quantities(double visibility);

/// Rate per detected coincidence scaled by `coincidence_gain`.
KeyRateReport e91_key_rate(double s, double qber, const ProtocolConfig& cfg, double f_rep,
                           double coincidence_gain = 1.0);
/// The unclamped bracket 1 - f H2(Q) - H2((1 + sqrt(max(0,(S/2)^2 - 1)))/2).
double e91_bracket(double s, double qber, double f_ec);

struct CowVisibility {
  double visibility = 1.0;
  double phase_error = 0.0;
};
CowVisibility cow_visibility(double alpha_sq, double phase_drift);

KeyRateReport cow_key_rate(double q_mu, double e_mu, double e_ph, const ProtocolConfig& cfg,
                           double f_rep);

/// Model-level evaluation of one protocol on a channel point.
struct ProtocolModel {
  double q_mu = 0.0;
  double e_mu = 0.5;
  double visibility = 0.0;
  Observation weak;  ///< BB84 weak decoy; zero otherwise
  KeyRateReport report;
};

/// `intensity` is mu_s (BB84), the mean pair number (E91) or |alpha|^2 (COW);
/// `weak_intensity` is only read for BB84. `visibility_factor` multiplies the
/// E91 source visibility; `phase_drift` is the residual COW drift.
struct ModelInputs {
  double intensity = 0.5;
  double weak_intensity = 0.1;
  double visibility_factor = 1.0;
  double phase_drift = 0.0;
};

ProtocolModel evaluate_protocol(const ChannelPoint& ch, const ProtocolConfig& cfg,
                                const ModelInputs& in, double f_rep);

/// Convenience for rate tables: evaluates at the protocol's nominal intensities.
ProtocolModel evaluate_protocol(const LinkParams& link, const ProtocolConfig& cfg,
                                double phase_drift = 0.0);

/// Fills r_finite and r_bps from a per-pulse rate.
void finalize_report(KeyRateReport& rep, const ProtocolConfig& cfg, double f_rep);

}  // namespace qkd
