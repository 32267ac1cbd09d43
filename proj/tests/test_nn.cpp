#include <cmath>
#include <functional>
#include <limits>

#include "doctest.h"
#include "qkd/nn.hpp"

using namespace qkd;
using namespace qkd::nn;
using doctest::Approx;

namespace {

Matrix random_matrix(int r, int c, CounterRng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.v) x = scale * (2.0 * rng.uniform() - 1.0);
  return m;
}

double rel_err(double a, double b) {
  const double den = std::max({std::abs(a), std::abs(b), 1e-7});
  return std::abs(a - b) / den;
}

// Builds a scalar loss from an input matrix; parameters live in the closure.
using Graph = std::function<Tape::Var(Tape&, Tape::Var)>;

// Compares tape gradients for the input and every parameter against central
// differences with step 1e-5. Returns the worst relative error.
double gradient_check(const Graph& g, Matrix x, const std::vector<Parameter*>& params) {
  auto loss_at = [&](const Matrix& xin) {
    Tape t;
    return t.value(g(t, t.input(xin))).v[0];
  };
  Tape tape;
  const auto xi = tape.input(x);
  for (auto* p : params) p->zero_grad();
  tape.backward(g(tape, xi));
  const Matrix gx = tape.grad(xi);

  constexpr double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double keep = x.v[i];
    x.v[i] = keep + h;
    const double up = loss_at(x);
    x.v[i] = keep - h;
    const double dn = loss_at(x);
    x.v[i] = keep;
    worst = std::max(worst, rel_err(gx.v[i], (up - dn) / (2 * h)));
  }
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.v.size(); ++i) {
      const double keep = p->value.v[i];
      p->value.v[i] = keep + h;
      const double up = loss_at(x);
      p->value.v[i] = keep - h;
      const double dn = loss_at(x);
      p->value.v[i] = keep;
      worst = std::max(worst, rel_err(p->grad.v[i], (up - dn) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("conv1d_causal hand example") {
  Conv1dLayer L(1, 1, 2, 2);
  L.kernel.value.v = {1.0, 1.0};
  const auto y = conv1d_causal(Matrix::from_rows({{1, 2, 3, 4}}), L);
  CHECK(y.v == std::vector<double>{1, 2, 4, 6});
}

TEST_CASE("conv1d_causal identity kernel adds the bias") {
  for (int d : {1, 3, 8}) {
    Conv1dLayer L(1, 1, 1, d);
    L.kernel.value.v = {1.0};
    L.bias.value.v = {0.25};
    const auto y = conv1d_causal(Matrix::from_rows({{1, -2, 3}}), L);
    CHECK(y.v == std::vector<double>{1.25, -1.75, 3.25});
  }
}

TEST_CASE("conv1d_causal rejects channel mismatch and bad metadata") {
  Conv1dLayer L(2, 1, 3, 1);
  CHECK_THROWS_AS(conv1d_causal(Matrix(3, 5), L), ShapeError);
  CHECK_THROWS_AS(Conv1dLayer(1, 1, 3, 0), ShapeError);
  CHECK_THROWS_AS(Conv1dLayer(1, 1, 0, 1), ShapeError);
}

TEST_CASE("causality holds exactly for dilations 1, 2, 4, 8") {
  CounterRng rng(21);
  for (int d : {1, 2, 4, 8}) {
    Conv1dLayer L(3, 4, 3, d);
    L.init(rng);
    const Matrix x = random_matrix(3, 16, rng);
    const Matrix y = conv1d_causal(x, L);
    for (int t0 = 0; t0 < 16; ++t0) {
      Matrix xp = x;
      for (int c = 0; c < 3; ++c) xp(c, t0) += 1.0 + rng.uniform();
      const Matrix yp = conv1d_causal(xp, L);
      for (int o = 0; o < 4; ++o)
        for (int t = 0; t < t0; ++t) CHECK(yp(o, t) == y(o, t));
    }
  }
}

TEST_CASE("elementwise ops and dense identities") {
  CHECK(relu(Matrix::from_rows({{-1, 0, 2}})).v == std::vector<double>{0, 0, 2});
  CounterRng rng(2);
  const Matrix x = random_matrix(4, 5, rng);
  CHECK(residual_add(x, Matrix(4, 5)) == x);
  CHECK_THROWS_AS(residual_add(x, Matrix(5, 4)), ShapeError);
  DenseLayer D(4, 4);
  for (int i = 0; i < 4; ++i) D.weight.value(i, i) = 1.0;
  CHECK(dense(x, D) == x);
  CHECK_THROWS_AS(dense(Matrix(3, 1), D), ShapeError);
}

TEST_CASE("backward basics") {
  Tape t;
  const auto x = t.input(Matrix(1, 1, 3.0));
  t.backward(t.sum(x));
  CHECK(t.grad(x).v[0] == 1.0);
  CHECK_THROWS_AS(t.backward(1), std::logic_error);

  Tape empty;
  CHECK_THROWS(empty.backward(0));

  Tape vec;
  const auto v = vec.input(Matrix(2, 1, 1.0));
  CHECK_THROWS_AS(vec.backward(v), ShapeError);
}

TEST_CASE("gradient check: every op, 10 random trials") {
  CounterRng rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int c_in = 1 + static_cast<int>(rng() % 4);
    const int c_out = 1 + static_cast<int>(rng() % 4);
    const int T = 2 + static_cast<int>(rng() % 15);
    const int k = 1 + static_cast<int>(rng() % 3);
    const int d = 1 << (rng() % 4);
    const Matrix x = random_matrix(c_in, T, rng);

    Conv1dLayer conv(c_in, c_out, k, d);
    conv.init(rng);
    conv.bias.value = random_matrix(c_out, 1, rng);
    const Matrix target = random_matrix(c_out, T, rng);
    worst = std::max(worst, gradient_check(
                                [&](Tape& t, Tape::Var in) {
                                  return t.mse(t.relu(t.conv1d_causal(in, conv)), target);
                                },
                                x, {&conv.kernel, &conv.bias}));

    DenseLayer dl(c_in, c_out);
    dl.init(rng);
    dl.bias.value = random_matrix(c_out, 1, rng);
    const Matrix tgt2 = random_matrix(c_out, T, rng);
    worst = std::max(worst, gradient_check(
                                [&](Tape& t, Tape::Var in) {
                                  return t.mse(t.tanh(t.dense(in, dl)), tgt2);
                                },
                                x, {&dl.weight, &dl.bias}));

    Conv1dLayer proj(c_in, c_in, 1, 1);
    proj.init(rng);
    const Matrix tgt3 = random_matrix(c_in, 1, rng);
    worst = std::max(worst, gradient_check(
                                [&](Tape& t, Tape::Var in) {
                                  const auto h = t.add(t.conv1d_causal(in, proj), in);
                                  return t.mse(t.last_column(h), tgt3);
                                },
                                x, {&proj.kernel, &proj.bias}));

    worst = std::max(worst, gradient_check(
                                [&](Tape& t, Tape::Var in) { return t.sum(t.tanh(in)); }, x, {}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("seeded backward gives the outer-product weight gradient") {
  CounterRng rng(4);
  DenseLayer D(3, 2);
  D.init(rng);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix seed = random_matrix(2, 4, rng);

  Tape a;
  const auto xa = a.input(x);
  D.weight.zero_grad();
  a.backward(a.dense(xa, D), seed);
  const Matrix gw = D.weight.grad;

  // d/dW of sum(seed * (W x + b)) is seed x^T.
  Matrix manual(2, 3);
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i)
      for (int n = 0; n < 4; ++n) manual(o, i) += seed(o, n) * x(i, n);
  for (std::size_t i = 0; i < gw.v.size(); ++i) CHECK(gw.v[i] == Approx(manual.v[i]));
}

TEST_CASE("no NaN or Inf for inputs up to 1e6") {
  CounterRng rng(8);
  Conv1dLayer conv(2, 3, 3, 2);
  conv.init(rng);
  DenseLayer dl(3, 2);
  dl.init(rng);
  const Matrix x = random_matrix(2, 16, rng, 1e6);
  Tape t;
  const auto in = t.input(x);
  const auto out = t.tanh(t.dense(t.last_column(t.relu(t.conv1d_causal(in, conv))), dl));
  t.backward(t.mse(out, Matrix(2, 1)));
  for (double v : t.value(out).v) CHECK(std::isfinite(v));
  for (double g : t.grad(in).v) CHECK(std::isfinite(g));
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves params unchanged") {
    Parameter p(Matrix::from_rows({{1.0, -2.0}}));
    Adam opt({&p});
    opt.step();
    CHECK(p.value.v == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("constant gradient moves against its sign") {
    Parameter p(Matrix::from_rows({{0.0, 0.0}}));
    Adam opt({&p}, {.lr = 0.01});
    for (int i = 0; i < 100; ++i) {
      p.grad.v = {2.0, -0.5};
      opt.step();
    }
    CHECK(p.value.v[0] < 0.0);
    CHECK(p.value.v[1] > 0.0);
  }
  SUBCASE("one step on w^2 from w = 1") {
    Parameter p(Matrix(1, 1, 1.0));
    Adam opt({&p}, {.lr = 0.1});
    p.grad.v = {2.0};
    opt.step();
    // First bias-corrected step has magnitude lr.
    CHECK(p.value.v[0] == Approx(0.9).epsilon(1e-7));
  }
  SUBCASE("non-finite gradient is rejected") {
    Parameter p(Matrix::from_rows({{1.0, 1.0}}));
    Adam opt({&p});
    p.grad.v = {1.0, std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(opt.step(), NonFiniteGradient);
    CHECK(p.value.v == std::vector<double>{1.0, 1.0});
    CHECK(opt.steps() == 0);
  }
}

TEST_CASE("checkpoint round trip is exact") {
  CounterRng rng(12);
  Conv1dLayer a(3, 4, 3, 2);
  a.init(rng);
  a.bias.value = random_matrix(4, 1, rng);
  const nlohmann::json doc = params_to_json({{"k", &a.kernel}, {"b", &a.bias}});
  const auto text = doc.dump();

  Conv1dLayer b(3, 4, 3, 2);
  params_from_json(nlohmann::json::parse(text), {{"k", &b.kernel}, {"b", &b.bias}});
  CHECK(b.kernel.value == a.kernel.value);
  CHECK(b.bias.value == a.bias.value);

  Conv1dLayer wrong(3, 4, 2, 2);
  CHECK_THROWS(params_from_json(doc, {{"k", &wrong.kernel}, {"b", &wrong.bias}}));
  CHECK_THROWS(params_from_json(doc, {{"kernel", &b.kernel}, {"b", &b.bias}}));
}
