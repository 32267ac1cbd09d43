#pragma once

// Block-level stochastic simulator of the fiber link.
//
// One block is one control interval (one simulated second). Detection and
// error counts are drawn from binomials around the analytical model in
// rates.hpp; no per-pulse bit strings are produced on the main path.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qkd/rates.hpp"
#include "qkd/rng.hpp"

namespace qkd {

enum class EventKind { StepLossDb, StepDepol, StepDarkCounts, VisibilityDip };

/// StepLossDb, StepDepol and StepDarkCounts persist from `block_index` on and
/// add up; VisibilityDip only affects its own block.
struct NoiseEvent {
  int block_index = 0;
  EventKind kind = EventKind::StepLossDb;
  double magnitude = 0.0;
};

/// Bounded mean-reverting walk for the COW inter-pulse phase:
/// dphi(t+1) = (1 - reversion) dphi(t) + step * xi, clipped to [-bound, bound].
struct PhaseDriftProcess {
  double reversion = 0.05;
  double step = 0.05;
  double bound = 3.141592653589793;
};

struct NoiseSchedule {
  std::string name;
  std::vector<double> depol_p;       ///< depolarizing probability per block
  std::vector<double> damp_gamma;    ///< amplitude damping per block
  std::vector<double> misalignment;  ///< polarization rotation per block (rad)
  std::vector<double> stress_level;  ///< scenario stress level per block
  PhaseDriftProcess phase_drift;
  std::vector<NoiseEvent> events;

  int blocks() const { return static_cast<int>(depol_p.size()); }
  void validate() const;

  double depol(int t) const;
  double gamma(int t) const;
  double tilt(int t) const;
  double loss_db(int t) const;
  double extra_y0(int t) const;
  double visibility_dip(int t) const;
};

/// Scenario descriptor: a named scenario or an explicit depolarizing series.
struct ScenarioSpec {
  std::string name = "nominal";
  int blocks = 200;
  std::uint64_t seed = 0;  ///< only read by randomized scenarios
  std::vector<double> depol_series;  ///< used when name == "explicit"
};

/// Named scenarios: nominal, noise-sweep, splice-3db, sinusoid, train-mix,
/// forced-high-qber, explicit. Throws std::invalid_argument for unknown names.
NoiseSchedule make_scenario(const ScenarioSpec& spec);
std::vector<std::string> scenario_names();

/// Noise-sweep calibration: stress level L maps to depolarizing probability
/// kSweepDepolPerLevel * L and to a polarization rotation
/// kSweepBaseTilt + kSweepTiltPerLevel * L.
inline constexpr double kSweepDepolPerLevel = 0.12;
inline constexpr double kSweepBaseTilt = 0.1231;
inline constexpr double kSweepTiltPerLevel = 0.23;
inline constexpr int kSweepLevels = 6;

/// Controller-set source parameters for one block.
struct ControlState {
  double mu_s = 0.5;
  double mu_w = 0.1;
  double p_z = 0.5;
  double theta_c = 0.0;
  double phi_c = 0.0;

  /// Nominal calibration for a protocol: its configured intensities, p_z = 0.5,
  /// no compensation.
  static ControlState nominal(const ProtocolConfig& cfg);
  bool operator==(const ControlState&) const = default;
};

struct EffectiveLink {
  double eta = 0.0;
  double y0 = 0.0;
  double e_d = 0.0;
  double visibility = 1.0;
  double phase_residual = 0.0;  ///< COW: drift minus compensation
};

/// eta_eff = T(d) eta_det 10^(-loss/10) (1 - gamma); e_d_eff = e_d + sin^2(theta - theta_c) + p/2
/// (no rotation term for COW); V_eff = (1-p) cos^2(theta - theta_c) or
/// cow_visibility(mu, dphi - phi_c).
EffectiveLink effective_link(const LinkParams& link, const NoiseSchedule& sched,
                             const ControlState& ctrl, const ProtocolConfig& proto, int t,
                             double phase_drift = 0.0);

struct Telemetry {
  int block = 0;
  std::uint64_t n_pulses = 0;
  std::uint64_t n_sifted = 0;
  std::uint64_t n_errors = 0;
  double q_mu_hat = 0.0;
  double e_mu_hat = 0.5;
  double e_lo = 0.0;
  double e_hi = 1.0;
  double v_hat = 0.0;
  double y0_hat = 0.0;
  double eta_hat = 0.0;
  bool aborted = false;

  // Weak-decoy estimates (BB84 only). Not part of the CSV schema.
  double q_w_hat = 0.0;
  double e_w_hat = 0.5;
  // Model values the counts were drawn from.
  double model_q_mu = 0.0;
  double model_e_mu = 0.5;
  double model_visibility = 0.0;

  bool operator==(const Telemetry&) const = default;
};

struct WilsonInterval {
  double lo = 0.0;
  double hi = 1.0;
};

/// Wilson score interval; n == 0 yields [0, 1].
WilsonInterval wilson_interval(std::uint64_t n_err, std::uint64_t n, double confidence = 0.95);

/// Abort rule: a block aborts when its QBER estimate and the previous block's
/// both exceed the threshold.
class AbortRule {
 public:
  explicit AbortRule(double threshold = 0.11) : threshold_(threshold) {}
  bool update(double qber) {
    const bool exceed = qber > threshold_;
    const bool abort = exceed && prev_exceeded_;
    prev_exceeded_ = exceed;
    return abort;
  }
  double threshold() const { return threshold_; }
  void reset() { prev_exceeded_ = false; }

 private:
  double threshold_;
  bool prev_exceeded_ = false;
};

struct SimOptions {
  std::uint64_t n_pulses = 1'000'000;
  double confidence = 0.95;
  double abort_threshold = 0.11;
};

/// Draws one block. `rng` should be dedicated to this block.
Telemetry step_block(const LinkParams& link, const NoiseSchedule& sched, const ControlState& ctrl,
                     const ProtocolConfig& proto, int t, CounterRng& rng, AbortRule& abort,
                     const SimOptions& opts = {}, double phase_drift = 0.0);

/// Owns the generator state, the phase-drift walk and the abort history of
/// one run. Not thread-safe; run one instance per thread.
class ChannelSimulator {
 public:
  ChannelSimulator(LinkParams link, NoiseSchedule sched, ProtocolConfig proto,
                   std::uint64_t seed, SimOptions opts = {});

  Telemetry step(const ControlState& ctrl);

  int block() const { return block_; }
  bool done() const { return block_ >= sched_.blocks(); }
  double phase_drift() const { return phase_; }
  const LinkParams& link() const { return link_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const ProtocolConfig& protocol() const { return proto_; }
  const SimOptions& options() const { return opts_; }

 private:
  LinkParams link_;
  NoiseSchedule sched_;
  ProtocolConfig proto_;
  SimOptions opts_;
  CounterRng root_;
  AbortRule abort_;
  int block_ = 0;
  double phase_ = 0.0;
};

/// Per-pulse reference sampler for BB84 signal pulses (n_pulses <= 1e5).
/// Returns sifted detections and errors; validates the binomial shortcut.
struct BitLevelCounts {
  std::uint64_t n_sifted = 0;
  std::uint64_t n_errors = 0;
};
BitLevelCounts bit_level_block(const EffectiveLink& eff, double mu, std::uint64_t n_pulses,
                               CounterRng& rng, double e0 = 0.5);

inline constexpr const char* kTelemetryCsvHeader =
    "block,n_pulses,n_sifted,n_errors,q_mu_hat,e_mu_hat,e_lo,e_hi,v_hat,eta_hat,aborted";

/// Writes the telemetry columns of one row (no newline).
void write_telemetry_fields(std::ostream& out, const Telemetry& t);
void write_telemetry_csv(std::ostream& out, std::span<const Telemetry> rows);
/// Reads a telemetry CSV (extra trailing columns are ignored).
std::vector<Telemetry> read_telemetry_csv(std::istream& in);

/// Formats a double with 10 significant digits.
std::string format_sig10(double v);

}  // namespace qkd
