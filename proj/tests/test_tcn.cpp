#include <cmath>

#include "doctest.h"
#include "qkd/tcn.hpp"

using namespace qkd;
using doctest::Approx;

namespace {

std::vector<std::vector<double>> random_rows(int n, int f, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(n), std::vector<double>(f));
  for (auto& r : rows)
    for (double& x : r) x = rng.uniform();
  return rows;
}

nn::Parameter& param(Tcn& m, const std::string& name) {
  for (auto& [n, p] : m.params())
    if (n == name) return *p;
  throw std::out_of_range(name);
}

}  // namespace

TEST_CASE("config validation and receptive field") {
  TcnConfig c;
  CHECK(c.layers() == 4);
  CHECK(c.receptive_field() == 31);
  c.window = 1;
  CHECK_THROWS(c.validate());
  c = {};
  c.dilations = {1, 0};
  CHECK_THROWS(c.validate());
  c = {};
  c.features = {"q_mu", "bogus"};
  CHECK_THROWS(c.validate());
}

TEST_CASE("identity configuration forecasts the last row") {
  TcnConfig c;
  c.dilations = {1};
  c.kernel = 3;
  c.features = {"q_mu", "e_mu", "v"};
  c.hidden = 3;
  c.window = 4;
  Tcn m(c, 1);
  param(m, "conv0.kernel").value.fill(0.0);
  auto& head = param(m, "head.weight").value;
  head.fill(0.0);
  for (int i = 0; i < 3; ++i) head(i, i) = 1.0;
  const auto rows = random_rows(6, 3, 5);
  const auto fc = m.forward(rows);
  for (int j = 0; j < 3; ++j) CHECK(fc.raw[j] == Approx(rows.back()[j]).epsilon(1e-15));
  CHECK_FALSE(fc.persistence);
}

TEST_CASE("forward rejects short windows; predict falls back to persistence") {
  Tcn m;
  const auto rows = random_rows(10, 5, 1);
  CHECK_THROWS_AS(m.forward(rows), std::invalid_argument);
  const auto fc = m.predict(rows);
  CHECK(fc.persistence);
  CHECK(fc.raw == rows.back());
}

TEST_CASE("first window row is inside the receptive field") {
  TcnConfig c;
  c.window = 16;
  Tcn m(c, 3);
  auto rows = random_rows(16, 5, 2);
  const auto base = m.forward(rows);
  for (double& x : rows[0]) x += 0.5;
  const auto moved = m.forward(rows);
  double diff = 0.0;
  for (std::size_t j = 0; j < base.normalized.size(); ++j)
    diff += std::abs(base.normalized[j] - moved.normalized[j]);
  CHECK(diff > 0.0);
}

TEST_CASE("forecast at t ignores later blocks") {
  Tcn m(TcnConfig{}, 4);
  const auto rows = random_rows(80, 5, 9);
  const std::span<const std::vector<double>> all(rows);
  for (std::size_t t : {32u, 50u, 79u}) {
    const auto prefix = m.predict(all.first(t));
    auto edited = rows;
    for (std::size_t k = t; k < edited.size(); ++k) edited[k].assign(5, 0.123);
    const auto again = m.predict(std::span<const std::vector<double>>(edited).first(t));
    CHECK(prefix.normalized == again.normalized);
  }
}

TEST_CASE("normalizer round trip") {
  const auto rows = random_rows(150, 5, 6);
  Normalizer n;
  n.fit(rows, 100);
  for (const auto& r : rows) {
    const auto back = n.denormalize(n.normalize(r));
    for (std::size_t j = 0; j < r.size(); ++j) CHECK(std::abs(back[j] - r[j]) <= 1e-12);
  }
  std::vector<std::vector<double>> constant(20, {0.5, 0.5});
  n.fit(constant, 100);
  CHECK(n.normalize({0.5, 0.5}) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("training needs 64 pairs; zero epochs leave weights alone") {
  TcnConfig c;
  c.epochs = 0;
  Tcn m(c, 1);
  CHECK_THROWS_AS(m.train(random_rows(c.window + 63, 5, 1), 1), std::invalid_argument);
  const auto before = param(m, "conv2.kernel").value;
  const auto rep = m.train(random_rows(200, 5, 1), 1);
  CHECK(rep.epoch_loss.empty());
  CHECK(param(m, "conv2.kernel").value == before);
}

TEST_CASE("constant data trains to a constant forecast") {
  TcnConfig c;
  c.epochs = 60;
  c.lr = 3e-3;
  Tcn m(c, 2);
  std::vector<std::vector<double>> rows(200, {0.03, 0.02, 0.97, 0.05, 5e-6});
  const auto rep = m.train(rows, 2);
  CHECK(rep.final_loss < 1e-6);
  const auto fc = m.forward(rows);
  for (std::size_t j = 0; j < 5; ++j) CHECK(fc.raw[j] == Approx(rows[0][j]).epsilon(1e-3));
}

TEST_CASE("nominal data: trained MSE does not exceed persistence") {
  const auto proto = ProtocolConfig::defaults(Protocol::BB84Decoy);
  TcnConfig c;
  const auto rows =
      feature_stream(LinkParams{}, proto, make_scenario({"nominal", 400}), 3, c.features);
  Tcn m(c, 3);
  const auto rep = m.train(rows, 3);
  CHECK(rep.final_loss <= m.persistence_mse(rows));
}

TEST_CASE("sinusoid benchmark: training improves and beats persistence") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto b = run_sinusoid_benchmark(seed);
    CHECK(b.report.final_loss < b.report.initial_loss);
    CHECK(b.trained_mse < b.initial_mse);
    CHECK(b.trained_mse <= 0.5 * b.persistence_mse);
    CHECK(b.report.epoch_loss.size() == 50);
  }
}

TEST_CASE("checkpoint round trip and determinism") {
  const auto rows = feature_stream(LinkParams{}, ProtocolConfig::defaults(Protocol::BB84Decoy),
                                   make_scenario({"sinusoid", 160}), 7, TcnConfig{}.features);
  TcnConfig c;
  c.epochs = 5;
  Tcn a(c, 7);
  const auto rep = a.train(rows, 7);
  const auto text = a.to_json().dump();
  Tcn b = Tcn::from_json(nlohmann::json::parse(text));
  CHECK(b.evaluate_mse(rows) == rep.final_loss);
  CHECK(b.to_json().dump() == text);

  Tcn again(c, 7);
  again.train(rows, 7);
  CHECK(again.to_json().dump() == text);
  CHECK_THROWS(Tcn::from_json(nlohmann::json{{"model", "ppo"}}));
}
