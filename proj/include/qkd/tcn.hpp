#pragma once

// Dilated causal residual TCN forecasting the next block's telemetry features.
//
// Layer l: h_l = relu(conv_l(h_{l-1})) + skip_l(h_{l-1}); skip is the identity
// when channel counts agree and a 1x1 convolution otherwise. A dense head
// reads the last time step. Inputs and outputs are z-scored features.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qkd/channel.hpp"
#include "qkd/nn.hpp"

namespace qkd {

/// Telemetry feature names: q_mu, e_mu, v, eta, y0.
const std::vector<std::string>& known_features();
double feature_value(const Telemetry& t, const std::string& name);
std::vector<double> feature_row(const Telemetry& t, const std::vector<std::string>& features);

/// Feature rows of a run held at nominal control.
std::vector<std::vector<double>> feature_stream(const LinkParams& link, const ProtocolConfig& proto,
                                                const NoiseSchedule& sched, std::uint64_t seed,
                                                const std::vector<std::string>& features,
                                                const SimOptions& opts = {});

struct TcnConfig {
  std::vector<int> dilations{1, 2, 4, 8};
  int kernel = 3;
  int hidden = 16;
  int window = 32;
  std::vector<std::string> features{"q_mu", "e_mu", "v", "eta", "y0"};
  int epochs = 50;
  double lr = 1e-3;
  int batch_targets = 16;     ///< forecast targets per optimizer step
  int calibration_rows = 100;  ///< prefix used for the frozen z-score

  int layers() const { return static_cast<int>(dilations.size()); }
  /// 1 + (k-1) * sum(d).
  int receptive_field() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TcnConfig& c);
void from_json(const nlohmann::json& j, TcnConfig& c);

/// Per-feature z-score. Standard deviations are floored so constant features
/// map to 0 instead of dividing by zero.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  void fit(std::span<const std::vector<double>> rows, int prefix);
  std::vector<double> normalize(const std::vector<double>& raw) const;
  std::vector<double> denormalize(const std::vector<double>& z) const;
  bool fitted() const { return !mean.empty(); }
};

struct Forecast {
  std::vector<double> raw;         ///< clamped to [0, 1]
  std::vector<double> normalized;  ///< network output
  bool persistence = false;        ///< warm-up fallback was used
};

struct TcnTrainReport {
  std::vector<double> epoch_loss;  ///< mean minibatch loss per epoch
  double initial_loss = 0.0;       ///< normalized MSE over all pairs before training
  double final_loss = 0.0;         ///< same, after training
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tcn {
 public:
  explicit Tcn(TcnConfig cfg = {}, std::uint64_t seed = 0);

  const TcnConfig& config() const { return cfg_; }
  const Normalizer& normalizer() const { return norm_; }
  void set_normalizer(Normalizer n);

  /// Forecast from the last `window` rows of raw features. Throws when fewer
  /// rows are given.
  Forecast forward(std::span<const std::vector<double>> rows) const;
  /// As forward(), but returns the last row while history is shorter than the
  /// window.
  Forecast predict(std::span<const std::vector<double>> history) const;

  /// Fits the normalizer on the calibration prefix, then minimizes the
  /// normalized one-step MSE with Adam. Needs at least 64 (window, next) pairs.
  TcnTrainReport train(std::span<const std::vector<double>> rows, std::uint64_t seed);
  /// Normalized one-step MSE over every (window, next) pair in `rows`.
  double evaluate_mse(std::span<const std::vector<double>> rows) const;
  /// Same pairs, predicting each next row by the previous one.
  double persistence_mse(std::span<const std::vector<double>> rows) const;

  nn::ParamList params();
  nlohmann::json to_json();
  static Tcn from_json(const nlohmann::json& doc);

 private:
  /// Residual stack output (hidden, T), before the head.
  nn::Matrix run_hidden(const nn::Matrix& x) const;
  nn::Tape::Var run_hidden(nn::Tape& tape, nn::Tape::Var x);
  nn::Matrix normalized_sequence(std::span<const std::vector<double>> rows) const;
  int features() const { return static_cast<int>(cfg_.features.size()); }

  TcnConfig cfg_;
  Normalizer norm_;
  std::vector<nn::Conv1dLayer> convs_;
  std::vector<nn::Conv1dLayer> projections_;  ///< 1x1, only where channels change
  std::vector<int> projection_of_;             ///< index into projections_ or -1
  nn::DenseLayer head_;
};

/// Sinusoidal-drift forecasting benchmark: BB84 at 25 km under the
/// "sinusoid" scenario. Trains on one 500-block stream and scores one-step
/// normalized MSE on an independent 500-block stream.
struct SinusoidBenchmark {
  double initial_mse = 0.0;      ///< held-out, untrained weights
  double trained_mse = 0.0;      ///< held-out, after training
  double persistence_mse = 0.0;  ///< held-out, last-row forecast
  TcnTrainReport report;
};
SinusoidBenchmark run_sinusoid_benchmark(std::uint64_t seed, const TcnConfig& cfg = {},
                                         int blocks = 500);

}  // namespace qkd
