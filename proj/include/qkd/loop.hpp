#pragma once

// Closed-loop runs: telemetry -> forecast -> action -> safety filter ->
// channel block -> key rate -> reward -> policy update, plus the two
// fixed-heuristic baselines and the metrics used to compare them.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qkd/channel.hpp"
#include "qkd/controller.hpp"
#include "qkd/counters.hpp"
#include "qkd/tcn.hpp"

namespace qkd {

enum class ControllerKind { ML, Static, Recalib };

std::string_view controller_name(ControllerKind k);
/// Accepts "ml", "static", "recalib". Throws std::invalid_argument.
ControllerKind parse_controller(std::string_view name);

struct LoopConfig {
  int warmup_blocks = 100;  ///< excluded from medians
  int pre_event_window = 50;
  double block_seconds = 1.0;
  int recalib_period = 15;
  std::vector<double> recalib_grid{0.3, 0.4, 0.5, 0.6, 0.7};
  RewardConfig reward;
  bool auto_skr_ref = true;  ///< reward.skr_ref := nominal asymptotic bps of the link
  bool online_updates = true;  ///< sample actions and update the policy; otherwise act on the mean
  SimOptions sim{.n_pulses = 250'000'000};  ///< one block = one second at f_rep
  void validate() const;
};

void to_json(nlohmann::json& j, const LoopConfig& c);
void from_json(const nlohmann::json& j, LoopConfig& c);

struct BlockRecord {
  int block = 0;
  ControlState ctrl;
  Telemetry telem;
  double skr_bps = 0.0;
  double skr_finite = 0.0;  ///< bps after the finite-key penalty
  double reward = 0.0;
  bool aborted = false;
};

struct EpisodeLog {
  std::string scenario;
  std::uint64_t seed = 0;
  ControllerKind controller = ControllerKind::Static;
  std::vector<BlockRecord> records;
  /// Model entry-point calls made during this run.
  CallCounters calls;
  std::vector<PpoReport> ppo_updates;
};

/// Secret-key rate implied by one block's estimates: decoy bounds on the
/// measured signal/weak gains (BB84), CHSH from the measured QBER (E91), or
/// the visibility-derived phase error (COW). Returns {asymptotic, finite} bps.
struct MeasuredRate {
  double skr_bps = 0.0;
  double skr_finite = 0.0;
};
MeasuredRate measured_rate(const Telemetry& t, const ControlState& ctrl, const ProtocolConfig& proto,
                           double f_rep);

/// Asymptotic model rate at nominal control on the undisturbed link.
double nominal_skr_bps(const LinkParams& link, const ProtocolConfig& proto);

/// Learned models for the ML controller.
struct MlModels {
  Tcn tcn;
  PpoAgent agent;
};

struct MlTrainConfig {
  int tcn_blocks = 2000;     ///< length of the train-mix forecasting stream
  int ppo_episodes = 360;
  int episode_blocks = 500;  ///< train-mix blocks per policy episode
  bool random_start = true;  ///< episodes start from a uniform draw over the safe boxes
};

void to_json(nlohmann::json& j, const MlTrainConfig& c);
void from_json(const nlohmann::json& j, MlTrainConfig& c);

/// Feature rows of the forecaster's train-mix training stream.
std::vector<std::vector<double>> forecaster_stream(const LinkParams& link, const ProtocolConfig& proto,
                                                   const TcnConfig& tcn, const LoopConfig& loop,
                                                   const MlTrainConfig& train, std::uint64_t seed);

/// First stage of train_ml_models. Throws DivergenceError from Tcn::train.
Tcn train_forecaster(const LinkParams& link, const ProtocolConfig& proto, const TcnConfig& tcn,
                     const LoopConfig& loop, const MlTrainConfig& train, std::uint64_t seed,
                     TcnTrainReport* report = nullptr);

/// Second stage: online policy training over train-mix episodes, observing
/// through `tcn`. Every update report is appended to `history`.
PpoAgent train_policy(const LinkParams& link, const ProtocolConfig& proto, const Tcn& tcn,
                      const PpoConfig& ppo, const LoopConfig& loop, const MlTrainConfig& train,
                      std::uint64_t seed, std::vector<PpoReport>* history = nullptr);

/// Fits the forecaster on a train-mix stream, then trains the policy online
/// over train-mix episodes. All streams derive from `seed` under labels that
/// evaluation never uses.
MlModels train_ml_models(const LinkParams& link, const ProtocolConfig& proto, const TcnConfig& tcn,
                         const PpoConfig& ppo, const LoopConfig& loop, const MlTrainConfig& train,
                         std::uint64_t seed);

/// One run. `models` is required for ControllerKind::ML and copied, so
/// online updates never leak between runs. Throws std::invalid_argument when
/// the agent's action mask does not match the protocol.
EpisodeLog run_episode(const LinkParams& link, const ProtocolConfig& proto, const ScenarioSpec& scenario,
                       ControllerKind kind, std::uint64_t seed, const LoopConfig& cfg,
                       const MlModels* models = nullptr);

/// Runs every seed; at most `threads` run concurrently. Output order follows
/// `seeds`.
std::vector<EpisodeLog> run_closed_loop(const LinkParams& link, const ProtocolConfig& proto,
                                        const ScenarioSpec& scenario, ControllerKind kind,
                                        const std::vector<std::uint64_t>& seeds, const LoopConfig& cfg,
                                        const MlModels* models = nullptr, int threads = 1);

// ---- metrics --------------------------------------------------------------

/// Smallest tau such that skr >= 0.95 * (median skr over the `pre_window`
/// blocks before the event) at event+tau, event+tau+1 and event+tau+2.
/// std::nullopt when that never happens inside the series.
std::optional<int> adaptation_time(const std::vector<double>& skr_bps, int event_block,
                                   int pre_window = 50);
std::optional<int> adaptation_time(const EpisodeLog& log, int event_block, int pre_window = 50);

double median(std::vector<double> x);

/// Per-seed summary over post-warm-up blocks.
struct SeedMetrics {
  std::uint64_t seed = 0;
  double median_skr_bps = 0.0;
  double median_qber = 0.0;
  int abort_count = 0;
  double total_bits = 0.0;                ///< sum over all blocks of skr_bps * block_seconds
  std::optional<int> adaptation_blocks;  ///< only when the scenario has an event
};
SeedMetrics seed_metrics(const EpisodeLog& log, const LoopConfig& cfg, std::optional<int> event_block);

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean over resamples of `values` (with
/// replacement, same size).
ConfidenceInterval bootstrap_ci(const std::vector<double>& values, CounterRng rng, int resamples = 10'000,
                                double confidence = 0.95);

struct MetricRow {
  std::string controller;
  std::string scenario;
  std::string metric;
  double value = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

inline constexpr const char* kRunMetricsCsvHeader = "controller,scenario,metric,value,ci_lo,ci_hi";

struct RunMetrics {
  std::vector<MetricRow> rows;
  /// Seed-level summaries per controller, in input order.
  std::vector<std::pair<ControllerKind, std::vector<SeedMetrics>>> per_seed;

  const MetricRow* find(std::string_view controller, std::string_view metric) const;
};

/// Aggregates are means of seed-level values with 10,000-resample percentile
/// CIs. Adaptation aggregates cover recovered seeds only; the
/// `adaptation_recovered` row counts them. When both ML and static runs are
/// present, paired relative-improvement rows for the ML controller are added.
/// Throws std::invalid_argument for fewer than two controllers or mismatched
/// scenario/seed sets.
RunMetrics compare(const std::vector<std::vector<EpisodeLog>>& runs, const LoopConfig& cfg,
                   std::optional<int> event_block, int resamples = 10'000);

/// First event block of a schedule, if any.
std::optional<int> first_event_block(const NoiseSchedule& sched);

inline constexpr const char* kEpisodeCsvExtraColumns =
    "mu_s,mu_w,p_z,theta_c,phi_c,skr_bps,skr_finite,reward,controller";

void write_episode_csv(std::ostream& out, const EpisodeLog& log);
void write_run_metrics_csv(std::ostream& out, const RunMetrics& m);

}  // namespace qkd
