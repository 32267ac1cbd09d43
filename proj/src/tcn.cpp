#include "qkd/tcn.hpp"

#include "qkd/counters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qkd {

using nn::Matrix;
using nn::Tape;

const std::vector<std::string>& known_features() {
  static const std::vector<std::string> names{"q_mu", "e_mu", "v", "eta", "y0"};
  return names;
}

double feature_value(const Telemetry& t, const std::string& name) {
  if (name == "q_mu") return t.q_mu_hat;
  if (name == "e_mu") return t.e_mu_hat;
  if (name == "v") return t.v_hat;
  if (name == "eta") return t.eta_hat;
  if (name == "y0") return t.y0_hat;
  throw std::invalid_argument("unknown feature '" + name + "'");
}

std::vector<double> feature_row(const Telemetry& t, const std::vector<std::string>& features) {
  std::vector<double> row;
  row.reserve(features.size());
  for (const auto& f : features) row.push_back(feature_value(t, f));
  return row;
}

std::vector<std::vector<double>> feature_stream(const LinkParams& link, const ProtocolConfig& proto,
                                                const NoiseSchedule& sched, std::uint64_t seed,
                                                const std::vector<std::string>& features,
                                                const SimOptions& opts) {
  ChannelSimulator sim(link, sched, proto, seed, opts);
  const ControlState ctrl = ControlState::nominal(proto);
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(sched.blocks()));
  while (!sim.done()) rows.push_back(feature_row(sim.step(ctrl), features));
  return rows;
}

int TcnConfig::receptive_field() const {
  return 1 + (kernel - 1) * std::accumulate(dilations.begin(), dilations.end(), 0);
}

void TcnConfig::validate() const {
  if (dilations.empty()) throw std::invalid_argument("TcnConfig: at least one layer");
  for (int d : dilations)
    if (d < 1) throw std::invalid_argument("TcnConfig: dilations must be >= 1");
  if (kernel < 1 || hidden < 1) throw std::invalid_argument("TcnConfig: kernel and hidden >= 1");
  if (window < 2) throw std::invalid_argument("TcnConfig: window must be >= 2");
  if (features.empty()) throw std::invalid_argument("TcnConfig: no features");
  for (const auto& f : features)
    if (std::find(known_features().begin(), known_features().end(), f) == known_features().end())
      throw std::invalid_argument("TcnConfig: unknown feature '" + f + "'");
  if (epochs < 0 || !(lr > 0.0) || batch_targets < 1 || calibration_rows < 1)
    throw std::invalid_argument("TcnConfig: epochs >= 0, lr > 0, batch_targets >= 1");
}

void to_json(nlohmann::json& j, const TcnConfig& c) {
  j = {{"dilations", c.dilations}, {"kernel", c.kernel},     {"hidden", c.hidden},
       {"window", c.window},       {"features", c.features}, {"epochs", c.epochs},
       {"lr", c.lr},               {"batch_targets", c.batch_targets},
       {"calibration_rows", c.calibration_rows}};
}

void from_json(const nlohmann::json& j, TcnConfig& c) {
  TcnConfig d;
  c.dilations = j.value("dilations", d.dilations);
  c.kernel = j.value("kernel", d.kernel);
  c.hidden = j.value("hidden", d.hidden);
  c.window = j.value("window", d.window);
  c.features = j.value("features", d.features);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.batch_targets = j.value("batch_targets", d.batch_targets);
  c.calibration_rows = j.value("calibration_rows", d.calibration_rows);
}

// ---- normalizer ----------------------------------------------------------

void Normalizer::fit(std::span<const std::vector<double>> rows, int prefix) {
  if (rows.empty()) throw std::invalid_argument("Normalizer: no rows");
  const std::size_t n = std::min(rows.size(), static_cast<std::size_t>(std::max(prefix, 1)));
  const std::size_t f = rows[0].size();
  mean.assign(f, 0.0);
  stddev.assign(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) mean[j] += rows[i][j];
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) stddev[j] += (rows[i][j] - mean[j]) * (rows[i][j] - mean[j]);
  for (std::size_t j = 0; j < f; ++j) {
    const double floor = 1e-9 + 1e-6 * std::abs(mean[j]);
    stddev[j] = std::max(std::sqrt(stddev[j] / static_cast<double>(n)), floor);
  }
}

std::vector<double> Normalizer::normalize(const std::vector<double>& raw) const {
  if (raw.size() != mean.size()) throw std::invalid_argument("Normalizer: width mismatch");
  std::vector<double> z(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) z[j] = (raw[j] - mean[j]) / stddev[j];
  return z;
}

std::vector<double> Normalizer::denormalize(const std::vector<double>& z) const {
  if (z.size() != mean.size()) throw std::invalid_argument("Normalizer: width mismatch");
  std::vector<double> raw(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) raw[j] = z[j] * stddev[j] + mean[j];
  return raw;
}

// ---- model ---------------------------------------------------------------

Tcn::Tcn(TcnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  CounterRng rng = CounterRng(seed).split("tcn-init");
  int c_in = features();
  for (int d : cfg_.dilations) {
    convs_.emplace_back(c_in, cfg_.hidden, cfg_.kernel, d);
    convs_.back().init(rng);
    if (c_in != cfg_.hidden) {
      projections_.emplace_back(c_in, cfg_.hidden, 1, 1);
      projections_.back().init(rng);
      projection_of_.push_back(static_cast<int>(projections_.size()) - 1);
    } else {
      projection_of_.push_back(-1);
    }
    c_in = cfg_.hidden;
  }
  head_ = nn::DenseLayer(cfg_.hidden, features());
  head_.init(rng, 0.1);
  norm_.mean.assign(features(), 0.0);
  norm_.stddev.assign(features(), 1.0);
}

void Tcn::set_normalizer(Normalizer n) {
  if (static_cast<int>(n.mean.size()) != features() || n.stddev.size() != n.mean.size())
    throw std::invalid_argument("Tcn: normalizer width mismatch");
  norm_ = std::move(n);
}

Matrix Tcn::run_hidden(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    Matrix y = nn::relu(nn::conv1d_causal(h, convs_[l]));
    const int p = projection_of_[l];
    h = nn::residual_add(std::move(y), p < 0 ? h : nn::conv1d_causal(h, projections_[p]));
  }
  return h;
}

Tape::Var Tcn::run_hidden(Tape& tape, Tape::Var x) {
  Tape::Var h = x;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    const auto y = tape.relu(tape.conv1d_causal(h, convs_[l]));
    const int p = projection_of_[l];
    h = tape.add(y, p < 0 ? h : tape.conv1d_causal(h, projections_[p]));
  }
  return h;
}

Matrix Tcn::normalized_sequence(std::span<const std::vector<double>> rows) const {
  const int f = features();
  Matrix x(f, static_cast<int>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (static_cast<int>(rows[t].size()) != f) throw std::invalid_argument("Tcn: row width mismatch");
    const auto z = norm_.normalize(rows[t]);
    for (int j = 0; j < f; ++j) x(j, static_cast<int>(t)) = z[j];
  }
  return x;
}

Forecast Tcn::forward(std::span<const std::vector<double>> rows) const {
  const auto w = static_cast<std::size_t>(cfg_.window);
  if (rows.size() < w) throw std::invalid_argument("Tcn::forward: window shorter than configured");
  const Matrix x = normalized_sequence(rows.subspan(rows.size() - w));
  const Matrix h = run_hidden(x);
  Matrix last(h.rows, 1);
  for (int r = 0; r < h.rows; ++r) last(r, 0) = h(r, h.cols - 1);
  const Matrix out = nn::dense(last, head_);
  Forecast fc;
  fc.normalized.resize(out.rows);
  for (int j = 0; j < out.rows; ++j) fc.normalized[j] = out(j, 0);
  fc.raw = norm_.denormalize(fc.normalized);
  for (double& r : fc.raw) r = std::clamp(r, 0.0, 1.0);
  return fc;
}

Forecast Tcn::predict(std::span<const std::vector<double>> history) const {
  if (history.empty()) throw std::invalid_argument("Tcn::predict: empty history");
  ++call_counters().tcn_predict;
  if (history.size() >= static_cast<std::size_t>(cfg_.window)) return forward(history);
  Forecast fc;
  fc.raw = history.back();
  for (double& r : fc.raw) r = std::clamp(r, 0.0, 1.0);
  fc.normalized = norm_.normalize(history.back());
  fc.persistence = true;
  return fc;
}

double Tcn::evaluate_mse(std::span<const std::vector<double>> rows) const {
  const int w = cfg_.window;
  const int n = static_cast<int>(rows.size());
  if (n <= w) throw std::invalid_argument("Tcn::evaluate_mse: need more rows than the window");
  double sum = 0.0;
  long count = 0;
  for (int t = w - 1; t + 1 < n; ++t) {
    const Forecast fc = forward(rows.subspan(static_cast<std::size_t>(t - w + 1), w));
    const auto target = norm_.normalize(rows[t + 1]);
    for (std::size_t j = 0; j < target.size(); ++j) {
      const double e = fc.normalized[j] - target[j];
      sum += e * e;
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

double Tcn::persistence_mse(std::span<const std::vector<double>> rows) const {
  const int w = cfg_.window;
  const int n = static_cast<int>(rows.size());
  if (n <= w) throw std::invalid_argument("Tcn::persistence_mse: need more rows than the window");
  double sum = 0.0;
  long count = 0;
  for (int t = w - 1; t + 1 < n; ++t) {
    const auto a = norm_.normalize(rows[t]);
    const auto b = norm_.normalize(rows[t + 1]);
    for (std::size_t j = 0; j < a.size(); ++j) {
      sum += (a[j] - b[j]) * (a[j] - b[j]);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

TcnTrainReport Tcn::train(std::span<const std::vector<double>> rows, std::uint64_t seed) {
  const int w = cfg_.window;
  const int n = static_cast<int>(rows.size());
  if (n - w < 64) throw std::invalid_argument("Tcn::train: need at least 64 (window, next) pairs");
  Normalizer fitted;
  fitted.fit(rows, cfg_.calibration_rows);
  set_normalizer(std::move(fitted));

  TcnTrainReport rep;
  rep.initial_loss = evaluate_mse(rows);

  const Matrix seq = normalized_sequence(rows);
  // Targets t (forecast made after row t) run from w-1 to n-2. A chunk of
  // consecutive targets shares one forward pass over rows [first-w+1, last];
  // with receptive field <= window each column equals its windowed forecast.
  const int per_chunk = cfg_.receptive_field() <= w ? cfg_.batch_targets : 1;
  std::vector<int> starts;
  for (int t = w - 1; t + 1 < n; t += per_chunk) starts.push_back(t);

  auto ps = params();
  nn::Adam opt(nn::pointers(ps), {.lr = cfg_.lr, .max_grad_norm = 5.0});
  CounterRng rng = CounterRng(seed).split("tcn-train");
  const int f = features();

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::shuffle(starts.begin(), starts.end(), rng);
    double epoch_sum = 0.0;
    for (int first : starts) {
      const int last = std::min(first + per_chunk - 1, n - 2);
      const int lo = first - w + 1;
      const int len = last - lo + 1;
      Matrix x(f, len);
      Matrix target(f, last - first + 1);
      for (int j = 0; j < f; ++j) {
        for (int c = 0; c < len; ++c) x(j, c) = seq(j, lo + c);
        for (int c = first; c <= last; ++c) target(j, c - first) = seq(j, c + 1);
      }
      Tape tape;
      const auto h = run_hidden(tape, tape.input(x));
      const auto pred = tape.dense(tape.slice_cols(h, w - 1, len), head_);
      const auto loss = tape.mse(pred, target);
      const double lv = tape.value(loss).v[0];
      if (!std::isfinite(lv)) throw DivergenceError("TCN training diverged (non-finite loss)");
      opt.zero_grad();
      tape.backward(loss);
      try {
        opt.step();
      } catch (const nn::NonFiniteGradient&) {
        throw DivergenceError("TCN training diverged (non-finite gradient)");
      }
      epoch_sum += lv;
    }
    rep.epoch_loss.push_back(epoch_sum / static_cast<double>(starts.size()));
  }
  rep.final_loss = evaluate_mse(rows);
  if (!std::isfinite(rep.final_loss)) throw DivergenceError("TCN training diverged");
  return rep;
}

nn::ParamList Tcn::params() {
  nn::ParamList out;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    const auto tag = "conv" + std::to_string(l);
    out.emplace_back(tag + ".kernel", &convs_[l].kernel);
    out.emplace_back(tag + ".bias", &convs_[l].bias);
    if (projection_of_[l] >= 0) {
      auto& p = projections_[static_cast<std::size_t>(projection_of_[l])];
      out.emplace_back(tag + ".skip.kernel", &p.kernel);
      out.emplace_back(tag + ".skip.bias", &p.bias);
    }
  }
  out.emplace_back("head.weight", &head_.weight);
  out.emplace_back("head.bias", &head_.bias);
  return out;
}

nlohmann::json Tcn::to_json() {
  nlohmann::json j;
  j["model"] = "tcn";
  j["config"] = cfg_;
  j["normalizer"] = {{"mean", norm_.mean}, {"stddev", norm_.stddev}};
  j["params"] = nn::params_to_json(params());
  return j;
}

Tcn Tcn::from_json(const nlohmann::json& doc) {
  if (doc.value("model", "") != "tcn") throw std::invalid_argument("checkpoint is not a TCN model");
  Tcn m(doc.at("config").get<TcnConfig>());
  Normalizer n;
  n.mean = doc.at("normalizer").at("mean").get<std::vector<double>>();
  n.stddev = doc.at("normalizer").at("stddev").get<std::vector<double>>();
  m.set_normalizer(std::move(n));
  nn::params_from_json(doc.at("params"), m.params());
  return m;
}

SinusoidBenchmark run_sinusoid_benchmark(std::uint64_t seed, const TcnConfig& cfg, int blocks) {
  const auto proto = ProtocolConfig::defaults(Protocol::BB84Decoy);
  const auto sched = make_scenario({"sinusoid", blocks, 0, {}});
  const LinkParams link;
  const auto train_rows = feature_stream(link, proto, sched, seed, cfg.features);
  const auto test_rows =
      feature_stream(link, proto, sched, CounterRng(seed).split("held-out").key(), cfg.features);

  Tcn model(cfg, seed);
  Normalizer norm;
  norm.fit(train_rows, cfg.calibration_rows);
  model.set_normalizer(norm);
  SinusoidBenchmark b;
  b.initial_mse = model.evaluate_mse(test_rows);
  b.report = model.train(train_rows, seed);
  b.trained_mse = model.evaluate_mse(test_rows);
  b.persistence_mse = model.persistence_mse(test_rows);
  return b;
}

}  // namespace qkd
