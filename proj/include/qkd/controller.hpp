#pragma once

// PPO actor-critic over bounded parameter adjustments, the reward signal and
// the safety filter that keeps every applied parameter inside its safe box.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "qkd/channel.hpp"
#include "qkd/nn.hpp"
#include "qkd/tcn.hpp"

namespace qkd {

// ---- action space ---------------------------------------------------------

/// Action component order: d_mu_s, d_mu_w, d_pz, d_theta_c, d_phi_c.
inline constexpr int kActionDim = 5;
enum ActionIndex { kMuS = 0, kMuW = 1, kPz = 2, kTheta = 3, kPhi = 4 };

struct ActionBox {
  double d_mu = 0.05;
  double d_pz = 0.05;
  double d_theta = 0.02;
  double d_phi = 0.05;
  std::array<double, kActionDim> limits() const { return {d_mu, d_mu, d_pz, d_theta, d_phi}; }
};

struct SafetyBounds {
  double mu_s_min = 0.1, mu_s_max = 1.0;
  double mu_w_min = 0.02, mu_w_max = 0.3;
  double mu_gap = 0.05;  ///< mu_w < mu_s - mu_gap
  double p_z_min = 0.5, p_z_max = 0.95;
  double theta_min = -0.5, theta_max = 0.5;
  double phi_min = -3.141592653589793, phi_max = 3.141592653589793;
};

using ActionMask = std::array<bool, kActionDim>;
/// BB84: mu_s, mu_w, theta_c. E91: theta_c. COW: mu_s (as |alpha|^2), phi_c.
/// The sifting factor is fixed in the rate model, so p_z is never active.
ActionMask action_mask(Protocol p);

struct Action {
  std::array<double, kActionDim> delta{};
  bool fallback = false;  ///< non-finite network output replaced by zero
};

/// Clamps every parameter into the safe boxes, then enforces the intensity gap.
ControlState safety_filter(ControlState c, const SafetyBounds& b = {});
/// Adds the active deltas and applies the safety filter.
ControlState apply_action(const ControlState& c, const Action& a, const ActionMask& mask,
                          const SafetyBounds& b = {});

// ---- observation ----------------------------------------------------------

/// 15 components: forecast q_mu, e_mu, v, eta, y0; the same five current
/// estimates; mu_s, mu_w, p_z, theta_c, phi_c. Each is mapped linearly from a
/// fixed physical range onto [-1, 1] and clamped.
inline constexpr int kObsDim = 15;
const std::vector<std::string>& observation_names();

/// `forecast_features` names the entries of `fc.raw`; a missing feature falls
/// back to the current estimate.
std::vector<double> observe(const Forecast& fc, const std::vector<std::string>& forecast_features,
                            const Telemetry& telem, const ControlState& ctrl);

// ---- reward ---------------------------------------------------------------

struct RewardConfig {
  double w_rate = 1.0;
  double w_err = 0.5;
  double skr_ref = 1.0;  ///< bps
  double qber_ref = 0.11;
  double abort_penalty = 1.0;
  void validate() const;
};

/// w_rate skr/skr_ref - w_err qber/qber_ref - [aborted] abort_penalty.
double reward(double skr_bps, double qber, bool aborted, const RewardConfig& cfg);

/// Discounted returns with a zero terminal bootstrap.
std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma);
/// Raw advantages: returns minus values.
std::vector<double> advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                               double gamma);
/// Zero mean, unit variance; a constant vector maps to zeros.
std::vector<double> standardize(std::vector<double> x);

/// Clipped surrogate min(r A, clip(r, 1-eps, 1+eps) A) and its derivative in r.
struct Surrogate {
  double objective = 0.0;
  double d_ratio = 0.0;
};
Surrogate clipped_surrogate(double ratio, double adv, double eps);

// ---- agent ----------------------------------------------------------------

struct PpoConfig {
  double gamma = 0.99;
  double clip_eps = 0.2;
  double lr = 3e-4;
  int epochs = 4;
  int rollout = 256;
  int minibatch = 64;
  double entropy_coef = 0.01;
  double log_std_init = -0.5;
  int hidden = 64;
  double max_grad_norm = 0.5;
  void validate() const;
};

void to_json(nlohmann::json& j, const PpoConfig& c);
void from_json(const nlohmann::json& j, PpoConfig& c);

struct ActOutput {
  std::vector<double> pre_squash;  ///< Gaussian sample u (0 on masked dims)
  std::vector<double> action;      ///< box * tanh(u)
  double log_prob = 0.0;           ///< of u over active dims
  double value = 0.0;
  bool fallback = false;
};

struct Transition {
  std::vector<double> obs;
  std::vector<double> pre_squash;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
};

struct PpoReport {
  int update = 0;
  double mean_reward = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  bool aborted = false;  ///< non-finite loss; parameters restored
};

inline constexpr const char* kPpoCsvHeader = "update,mean_reward,policy_loss,value_loss,entropy";
void write_ppo_row(std::ostream& out, const PpoReport& r);

/// Diagonal-Gaussian actor with tanh squashing into a per-dimension box, plus
/// a state-value critic; both are 2-hidden-layer tanh MLPs.
class PpoAgent {
 public:
  PpoAgent(int obs_dim, std::vector<double> box, std::vector<bool> mask, PpoConfig cfg = {},
           std::uint64_t seed = 0);

  ActOutput act(const std::vector<double>& obs, CounterRng& rng, bool deterministic = false) const;
  double value(const std::vector<double>& obs) const;

  void store(Transition t);
  bool ready() const { return static_cast<int>(buffer_.size()) >= cfg_.rollout; }
  std::size_t buffered() const { return buffer_.size(); }
  /// Runs the clipped-surrogate and critic updates on the full buffer, then
  /// clears it. A non-finite loss restores the pre-update parameters.
  PpoReport update(CounterRng& rng);

  const PpoConfig& config() const { return cfg_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return static_cast<int>(box_.size()); }
  const std::vector<double>& box() const { return box_; }
  const std::vector<bool>& mask() const { return mask_; }
  nn::Parameter& log_std() { return log_std_; }
  int updates() const { return updates_; }

  nn::ParamList actor_params();
  nn::ParamList critic_params();
  nlohmann::json to_json();
  static PpoAgent from_json(const nlohmann::json& doc);

 private:
  nn::Matrix actor_mean(const nn::Matrix& obs) const;
  nn::Matrix critic_value(const nn::Matrix& obs) const;
  nn::Tape::Var actor_mean(nn::Tape& tape, nn::Tape::Var x);
  /// Network output in units of value_scale().
  nn::Tape::Var critic_value(nn::Tape& tape, nn::Tape::Var x);
  /// Returns are O(1/(1-gamma)) times a reward; the critic regresses them divided by this.
  double value_scale() const { return 1.0 / (1.0 - cfg_.gamma); }

  int obs_dim_;
  std::vector<double> box_;
  std::vector<bool> mask_;
  PpoConfig cfg_;
  nn::DenseLayer a1_, a2_, a_out_;
  nn::Parameter log_std_;
  nn::DenseLayer c1_, c2_, c_out_;
  nn::Adam actor_opt_, critic_opt_;
  std::vector<Transition> buffer_;
  int updates_ = 0;
};

/// Agent shaped for a protocol: 15-dim observation, 5-dim action with the
/// protocol's mask and the default boxes.
PpoAgent make_qkd_agent(Protocol p, const PpoConfig& cfg, std::uint64_t seed);
/// Converts the agent's action vector into deltas.
Action to_action(const ActOutput& out);

// ---- toy environment ------------------------------------------------------

/// One-step quadratic bandit: action a in [-1, 1], reward -(a - optimum)^2.
/// The observation is constant.
struct QuadraticToyEnv {
  double optimum = 0.6;
  std::vector<double> observation() const { return {1.0}; }
  double reward(double a) const { return -(a - optimum) * (a - optimum); }
};

PpoConfig toy_config();

struct ToyRun {
  std::vector<PpoReport> history;
  int updates_to_converge = -1;  ///< first update with |a_det - opt| <= tol*|opt|, or -1
  double final_action = 0.0;
};
/// Trains a fresh agent on the toy bandit for up to `max_updates` updates.
ToyRun train_toy(std::uint64_t seed, int max_updates = 200, double tolerance = 0.05,
                 PpoConfig cfg = toy_config());

}  // namespace qkd
