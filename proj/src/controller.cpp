#include "qkd/controller.hpp"

#include "qkd/counters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace qkd {

using nn::Matrix;
using nn::Tape;

namespace {

constexpr double kHalfLog2PiE = 0.5 * (1.0 + 1.8378770664093453);  // 0.5 (1 + ln 2 pi)
constexpr double kHalfLog2Pi = 0.5 * 1.8378770664093453;

struct Range {
  double lo, hi;
};

// Fixed physical ranges behind the observation scaling.
constexpr Range kFeatureRange[] = {{0.0, 0.2}, {0.0, 0.25}, {0.0, 1.0}, {0.0, 0.2}, {0.0, 1e-4}};

double scale(double x, Range r) {
  return std::clamp(2.0 * (x - r.lo) / (r.hi - r.lo) - 1.0, -1.0, 1.0);
}

Matrix column_of(const std::vector<double>& v) { return Matrix::column(v); }

}  // namespace

// ---- action space ---------------------------------------------------------

ActionMask action_mask(Protocol p) {
  switch (p) {
    case Protocol::BB84Decoy:
      return {true, true, false, true, false};
    case Protocol::E91:
      return {false, false, false, true, false};
    case Protocol::COW:
      return {true, false, false, false, true};
  }
  throw std::invalid_argument("action_mask: unknown protocol");
}

ControlState safety_filter(ControlState c, const SafetyBounds& b) {
  auto fix = [](double v, double lo, double hi) { return std::isfinite(v) ? std::clamp(v, lo, hi) : lo; };
  c.mu_s = fix(c.mu_s, b.mu_s_min, b.mu_s_max);
  // Strict gap: the weak intensity sits at least mu_gap (plus a hair) below mu_s.
  const double mu_w_hi = std::min(b.mu_w_max, c.mu_s - b.mu_gap - 1e-9);
  c.mu_w = fix(c.mu_w, b.mu_w_min, std::max(b.mu_w_min, mu_w_hi));
  c.p_z = fix(c.p_z, b.p_z_min, b.p_z_max);
  c.theta_c = std::isfinite(c.theta_c) ? std::clamp(c.theta_c, b.theta_min, b.theta_max) : 0.0;
  c.phi_c = std::isfinite(c.phi_c) ? std::clamp(c.phi_c, b.phi_min, b.phi_max) : 0.0;
  return c;
}

ControlState apply_action(const ControlState& c, const Action& a, const ActionMask& mask,
                          const SafetyBounds& b) {
  ControlState n = c;
  auto d = [&](int i) { return mask[i] && std::isfinite(a.delta[i]) ? a.delta[i] : 0.0; };
  n.mu_s += d(kMuS);
  n.mu_w += d(kMuW);
  n.p_z += d(kPz);
  n.theta_c += d(kTheta);
  n.phi_c += d(kPhi);
  return safety_filter(n, b);
}

// ---- observation ----------------------------------------------------------

const std::vector<std::string>& observation_names() {
  static const std::vector<std::string> names{
      "fc_q_mu", "fc_e_mu", "fc_v", "fc_eta", "fc_y0",  "q_mu",    "e_mu",  "v",
      "eta",     "y0",      "mu_s", "mu_w",   "p_z",    "theta_c", "phi_c"};
  return names;
}

std::vector<double> observe(const Forecast& fc, const std::vector<std::string>& forecast_features,
                            const Telemetry& telem, const ControlState& ctrl) {
  const auto& names = known_features();
  std::vector<double> obs;
  obs.reserve(kObsDim);
  for (std::size_t j = 0; j < names.size(); ++j) {
    double v = feature_value(telem, names[j]);
    const auto it = std::find(forecast_features.begin(), forecast_features.end(), names[j]);
    if (it != forecast_features.end()) {
      const auto k = static_cast<std::size_t>(it - forecast_features.begin());
      if (k < fc.raw.size()) v = fc.raw[k];
    }
    obs.push_back(scale(v, kFeatureRange[j]));
  }
  for (std::size_t j = 0; j < names.size(); ++j)
    obs.push_back(scale(feature_value(telem, names[j]), kFeatureRange[j]));
  const SafetyBounds b;
  obs.push_back(scale(ctrl.mu_s, {b.mu_s_min, b.mu_s_max}));
  obs.push_back(scale(ctrl.mu_w, {b.mu_w_min, b.mu_w_max}));
  obs.push_back(scale(ctrl.p_z, {b.p_z_min, b.p_z_max}));
  obs.push_back(scale(ctrl.theta_c, {b.theta_min, b.theta_max}));
  obs.push_back(scale(ctrl.phi_c, {b.phi_min, b.phi_max}));
  return obs;
}

// ---- reward ---------------------------------------------------------------

void RewardConfig::validate() const {
  if (!(w_rate > 0.0) || !(w_err > 0.0) || !(skr_ref > 0.0) || !(qber_ref > 0.0))
    throw std::invalid_argument("RewardConfig: w_rate, w_err, skr_ref and qber_ref must be > 0");
}

double reward(double skr_bps, double qber, bool aborted, const RewardConfig& cfg) {
  return cfg.w_rate * (skr_bps / cfg.skr_ref) - cfg.w_err * (qber / cfg.qber_ref) -
         (aborted ? cfg.abort_penalty : 0.0);
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  if (rewards.empty()) throw std::invalid_argument("discounted_returns: empty rollout");
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

std::vector<double> advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                               double gamma) {
  if (rewards.size() != values.size())
    throw std::invalid_argument("advantages: rewards and values differ in length");
  auto a = discounted_returns(rewards, gamma);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= values[i];
  return a;
}

std::vector<double> standardize(std::vector<double> x) {
  if (x.empty()) return x;
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : x) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
  return x;
}

Surrogate clipped_surrogate(double ratio, double adv, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  const double unclipped_obj = ratio * adv;
  const double clipped_obj = clipped * adv;
  if (unclipped_obj <= clipped_obj) return {unclipped_obj, adv};
  return {clipped_obj, 0.0};
}

// ---- config ---------------------------------------------------------------

void PpoConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("PpoConfig: gamma must lie in (0,1)");
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw std::invalid_argument("PpoConfig: clip_eps must lie in (0,1)");
  if (!(lr > 0.0) || epochs < 1 || minibatch < 1 || hidden < 1)
    throw std::invalid_argument("PpoConfig: lr, epochs, minibatch and hidden must be positive");
  if (rollout < minibatch) throw std::invalid_argument("PpoConfig: rollout must be >= minibatch");
}

void to_json(nlohmann::json& j, const PpoConfig& c) {
  j = {{"gamma", c.gamma},     {"clip_eps", c.clip_eps},       {"lr", c.lr},
       {"epochs", c.epochs},   {"rollout", c.rollout},         {"minibatch", c.minibatch},
       {"entropy_coef", c.entropy_coef}, {"log_std_init", c.log_std_init},
       {"hidden", c.hidden},   {"max_grad_norm", c.max_grad_norm}};
}

void from_json(const nlohmann::json& j, PpoConfig& c) {
  PpoConfig d;
  c.gamma = j.value("gamma", d.gamma);
  c.clip_eps = j.value("clip_eps", d.clip_eps);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.rollout = j.value("rollout", d.rollout);
  c.minibatch = j.value("minibatch", d.minibatch);
  c.entropy_coef = j.value("entropy_coef", d.entropy_coef);
  c.log_std_init = j.value("log_std_init", d.log_std_init);
  c.hidden = j.value("hidden", d.hidden);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
}

void write_ppo_row(std::ostream& out, const PpoReport& r) {
  out << r.update << ',' << format_sig10(r.mean_reward) << ',' << format_sig10(r.policy_loss) << ','
      << format_sig10(r.value_loss) << ',' << format_sig10(r.entropy) << '\n';
}

// ---- agent ----------------------------------------------------------------

PpoAgent::PpoAgent(int obs_dim, std::vector<double> box, std::vector<bool> mask, PpoConfig cfg,
                   std::uint64_t seed)
    : obs_dim_(obs_dim),
      box_(std::move(box)),
      mask_(std::move(mask)),
      cfg_(cfg),
      a1_(obs_dim, cfg.hidden),
      a2_(cfg.hidden, cfg.hidden),
      a_out_(cfg.hidden, static_cast<int>(box_.size())),
      log_std_(Matrix(static_cast<int>(box_.size()), 1, cfg.log_std_init)),
      c1_(obs_dim, cfg.hidden),
      c2_(cfg.hidden, cfg.hidden),
      c_out_(cfg.hidden, 1),
      actor_opt_(nn::pointers(actor_params()), {.lr = cfg.lr, .max_grad_norm = cfg.max_grad_norm}),
      critic_opt_(nn::pointers(critic_params()), {.lr = cfg.lr, .max_grad_norm = cfg.max_grad_norm}) {
  cfg_.validate();
  if (obs_dim < 1 || box_.empty() || mask_.size() != box_.size())
    throw std::invalid_argument("PpoAgent: bad observation or action shape");
  CounterRng rng = CounterRng(seed).split("ppo-init");
  a1_.init(rng);
  a2_.init(rng);
  a_out_.init(rng, 0.01);
  c1_.init(rng);
  c2_.init(rng);
  c_out_.init(rng, 1.0);
}

nn::ParamList PpoAgent::actor_params() {
  return {{"actor.l1.weight", &a1_.weight}, {"actor.l1.bias", &a1_.bias},
          {"actor.l2.weight", &a2_.weight}, {"actor.l2.bias", &a2_.bias},
          {"actor.out.weight", &a_out_.weight}, {"actor.out.bias", &a_out_.bias},
          {"actor.log_std", &log_std_}};
}

nn::ParamList PpoAgent::critic_params() {
  return {{"critic.l1.weight", &c1_.weight}, {"critic.l1.bias", &c1_.bias},
          {"critic.l2.weight", &c2_.weight}, {"critic.l2.bias", &c2_.bias},
          {"critic.out.weight", &c_out_.weight}, {"critic.out.bias", &c_out_.bias}};
}

Matrix PpoAgent::actor_mean(const Matrix& obs) const {
  return nn::dense(nn::tanh(nn::dense(nn::tanh(nn::dense(obs, a1_)), a2_)), a_out_);
}

Matrix PpoAgent::critic_value(const Matrix& obs) const {
  Matrix v = nn::dense(nn::tanh(nn::dense(nn::tanh(nn::dense(obs, c1_)), c2_)), c_out_);
  for (double& x : v.v) x *= value_scale();
  return v;
}

Tape::Var PpoAgent::actor_mean(Tape& t, Tape::Var x) {
  return t.dense(t.tanh(t.dense(t.tanh(t.dense(x, a1_)), a2_)), a_out_);
}

Tape::Var PpoAgent::critic_value(Tape& t, Tape::Var x) {
  return t.dense(t.tanh(t.dense(t.tanh(t.dense(x, c1_)), c2_)), c_out_);
}

double PpoAgent::value(const std::vector<double>& obs) const {
  if (static_cast<int>(obs.size()) != obs_dim_) throw std::invalid_argument("PpoAgent: obs size");
  return critic_value(column_of(obs)).v[0];
}

ActOutput PpoAgent::act(const std::vector<double>& obs, CounterRng& rng, bool deterministic) const {
  if (static_cast<int>(obs.size()) != obs_dim_) throw std::invalid_argument("PpoAgent: obs size");
  ++call_counters().ppo_act;
  const Matrix x = column_of(obs);
  const Matrix mean = actor_mean(x);
  ActOutput out;
  out.value = critic_value(x).v[0];
  const int n = act_dim();
  out.pre_squash.assign(n, 0.0);
  out.action.assign(n, 0.0);
  bool finite = std::isfinite(out.value);
  for (double m : mean.v) finite = finite && std::isfinite(m);
  if (!finite) {
    out.fallback = true;
    out.value = 0.0;
    return out;
  }
  double lp = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!mask_[i]) continue;
    const double ls = log_std_.value.v[i];
    const double sd = std::exp(ls);
    const double xi = rng.normal();
    const double u = deterministic ? mean.v[i] : mean.v[i] + sd * xi;
    out.pre_squash[i] = u;
    out.action[i] = box_[i] * std::tanh(u);
    if (sd > 0.0) {
      const double z = (u - mean.v[i]) / sd;
      lp += -0.5 * z * z - ls - kHalfLog2Pi;
    } else {
      lp = std::numeric_limits<double>::infinity();
    }
  }
  out.log_prob = lp;
  return out;
}

void PpoAgent::store(Transition t) {
  if (static_cast<int>(t.obs.size()) != obs_dim_ || static_cast<int>(t.pre_squash.size()) != act_dim())
    throw std::invalid_argument("PpoAgent::store: transition shape mismatch");
  buffer_.push_back(std::move(t));
}

PpoReport PpoAgent::update(CounterRng& rng) {
  if (buffer_.empty()) throw std::logic_error("PpoAgent::update: empty buffer");
  ++call_counters().ppo_update;
  const int n = static_cast<int>(buffer_.size());
  const int a_dim = act_dim();

  std::vector<double> rewards(n), values(n);
  for (int i = 0; i < n; ++i) {
    rewards[i] = buffer_[i].reward;
    values[i] = buffer_[i].value;
  }
  const auto returns = discounted_returns(rewards, cfg_.gamma);
  const auto adv = standardize(advantages(rewards, values, cfg_.gamma));

  // Snapshot for rollback on a non-finite loss.
  auto all = actor_params();
  for (auto& p : critic_params()) all.push_back(p);
  std::vector<Matrix> snapshot;
  for (auto& [name, p] : all) snapshot.push_back(p->value);
  const nn::Adam actor_opt_keep = actor_opt_;
  const nn::Adam critic_opt_keep = critic_opt_;

  PpoReport rep;
  rep.update = updates_ + 1;
  rep.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto actor_ptrs = nn::pointers(actor_params());
  const auto critic_ptrs = nn::pointers(critic_params());

  double pl_sum = 0.0, vl_sum = 0.0;
  int batches = 0;
  bool bad = false;
  for (int epoch = 0; epoch < cfg_.epochs && !bad; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n && !bad; start += cfg_.minibatch) {
      const int b = std::min(cfg_.minibatch, n - start);
      Matrix obs(obs_dim_, b), target(1, b);
      for (int k = 0; k < b; ++k) {
        const auto& tr = buffer_[order[start + k]];
        for (int j = 0; j < obs_dim_; ++j) obs(j, k) = tr.obs[j];
        target(0, k) = returns[order[start + k]] / value_scale();
      }

      // Actor: gradient of -mean(surrogate) - c_ent * entropy, seeded into the mean head.
      Tape at;
      const auto mean_var = actor_mean(at, at.input(obs));
      const Matrix& mean = at.value(mean_var);
      Matrix seed(a_dim, b);
      Matrix g_log_std(a_dim, 1);
      double policy_loss = 0.0;
      for (int k = 0; k < b; ++k) {
        const int idx = order[start + k];
        const auto& tr = buffer_[idx];
        double lp = 0.0;
        for (int i = 0; i < a_dim; ++i) {
          if (!mask_[i]) continue;
          const double ls = log_std_.value.v[i];
          const double z = (tr.pre_squash[i] - mean(i, k)) * std::exp(-ls);
          lp += -0.5 * z * z - ls - kHalfLog2Pi;
        }
        const double ratio = std::exp(lp - tr.log_prob);
        const Surrogate s = clipped_surrogate(ratio, adv[idx], cfg_.clip_eps);
        policy_loss -= s.objective / b;
        const double d_lp = -s.d_ratio * ratio / b;  // d loss / d log_prob
        if (d_lp == 0.0) continue;
        for (int i = 0; i < a_dim; ++i) {
          if (!mask_[i]) continue;
          const double ls = log_std_.value.v[i];
          const double inv_var = std::exp(-2.0 * ls);
          const double diff = tr.pre_squash[i] - mean(i, k);
          seed(i, k) += d_lp * diff * inv_var;
          g_log_std.v[i] += d_lp * (diff * diff * inv_var - 1.0);
        }
      }
      double entropy = 0.0;
      for (int i = 0; i < a_dim; ++i)
        if (mask_[i]) {
          entropy += log_std_.value.v[i] + kHalfLog2PiE;
          g_log_std.v[i] -= cfg_.entropy_coef;
        }
      const double actor_loss = policy_loss - cfg_.entropy_coef * entropy;

      Tape ct;
      const auto v_var = critic_value(ct, ct.input(obs));
      const auto v_loss = ct.mse(v_var, target);
      const double value_loss = ct.value(v_loss).v[0];

      if (!std::isfinite(actor_loss) || !std::isfinite(value_loss)) {
        bad = true;
        break;
      }
      for (auto* p : actor_ptrs) p->zero_grad();
      at.backward(mean_var, seed);
      for (int i = 0; i < a_dim; ++i) log_std_.grad.v[i] += g_log_std.v[i];
      for (auto* p : critic_ptrs) p->zero_grad();
      ct.backward(v_loss);
      try {
        actor_opt_.step(actor_ptrs);
        critic_opt_.step(critic_ptrs);
      } catch (const nn::NonFiniteGradient&) {
        bad = true;
        break;
      }
      // Keep the exploration scale in a sane band.
      for (double& ls : log_std_.value.v) ls = std::clamp(ls, -5.0, 1.0);
      pl_sum += policy_loss;
      vl_sum += value_loss;
      rep.entropy = entropy;
      ++batches;
    }
  }

  buffer_.clear();
  if (bad) {
    for (std::size_t i = 0; i < all.size(); ++i) {
      all[i].second->value = snapshot[i];
      all[i].second->zero_grad();
    }
    actor_opt_ = actor_opt_keep;
    critic_opt_ = critic_opt_keep;
    rep.aborted = true;
    return rep;
  }
  ++updates_;
  rep.policy_loss = pl_sum / std::max(batches, 1);
  rep.value_loss = vl_sum / std::max(batches, 1);
  return rep;
}

nlohmann::json PpoAgent::to_json() {
  std::vector<int> mask_int(mask_.begin(), mask_.end());
  nlohmann::json j;
  j["model"] = "ppo";
  j["obs_dim"] = obs_dim_;
  j["box"] = box_;
  j["mask"] = mask_int;
  j["config"] = cfg_;
  j["updates"] = updates_;
  j["actor"] = nn::params_to_json(actor_params());
  j["critic"] = nn::params_to_json(critic_params());
  return j;
}

PpoAgent PpoAgent::from_json(const nlohmann::json& doc) {
  if (doc.value("model", "") != "ppo") throw std::invalid_argument("checkpoint is not a PPO model");
  const auto mask_int = doc.at("mask").get<std::vector<int>>();
  std::vector<bool> mask(mask_int.begin(), mask_int.end());
  PpoAgent a(doc.at("obs_dim").get<int>(), doc.at("box").get<std::vector<double>>(), mask,
             doc.at("config").get<PpoConfig>());
  nn::params_from_json(doc.at("actor"), a.actor_params());
  nn::params_from_json(doc.at("critic"), a.critic_params());
  a.updates_ = doc.value("updates", 0);
  return a;
}

PpoAgent make_qkd_agent(Protocol p, const PpoConfig& cfg, std::uint64_t seed) {
  const auto limits = ActionBox{}.limits();
  const auto m = action_mask(p);
  return PpoAgent(kObsDim, std::vector<double>(limits.begin(), limits.end()),
                  std::vector<bool>(m.begin(), m.end()), cfg, seed);
}

Action to_action(const ActOutput& out) {
  Action a;
  a.fallback = out.fallback;
  for (int i = 0; i < kActionDim && i < static_cast<int>(out.action.size()); ++i)
    a.delta[i] = out.action[i];
  return a;
}

// ---- toy environment ------------------------------------------------------

PpoConfig toy_config() {
  PpoConfig c;
  c.gamma = 0.01;
  c.lr = 3e-3;
  c.hidden = 16;
  return c;
}

ToyRun train_toy(std::uint64_t seed, int max_updates, double tolerance, PpoConfig cfg) {
  const QuadraticToyEnv env;
  PpoAgent agent(1, {1.0}, {true}, cfg, seed);
  CounterRng act_rng = CounterRng(seed).split("toy-act");
  CounterRng upd_rng = CounterRng(seed).split("toy-update");
  ToyRun run;
  const auto obs = env.observation();
  for (int u = 0; u < max_updates; ++u) {
    while (!agent.ready()) {
      const ActOutput out = agent.act(obs, act_rng);
      agent.store({obs, out.pre_squash, out.log_prob, out.value, env.reward(out.action[0])});
    }
    run.history.push_back(agent.update(upd_rng));
    run.final_action = agent.act(obs, act_rng, true).action[0];
    if (run.updates_to_converge < 0 &&
        std::abs(run.final_action - env.optimum) <= tolerance * std::abs(env.optimum))
      run.updates_to_converge = u + 1;
  }
  return run;
}

}  // namespace qkd
