#include "qkd/nn.hpp"

#include <algorithm>
#include <cmath>

namespace qkd::nn {

Matrix::Matrix(int r, int c, double fillv) : rows(r), cols(c) {
  if (r < 0 || c < 0) throw ShapeError("Matrix: negative dimension");
  v.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fillv);
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rws) {
  const int r = static_cast<int>(rws.size());
  const int c = r > 0 ? static_cast<int>(rws[0].size()) : 0;
  Matrix m(r, c);
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(rws[i].size()) != c) throw ShapeError("Matrix::from_rows: ragged rows");
    for (int j = 0; j < c; ++j) m(i, j) = rws[i][j];
  }
  return m;
}

Matrix Matrix::column(const std::vector<double>& values) {
  Matrix m(static_cast<int>(values.size()), 1);
  m.v = values;
  return m;
}

void Matrix::fill(double x) { std::fill(v.begin(), v.end(), x); }

Parameter::Parameter(Matrix m) : value(std::move(m)), grad(value.rows, value.cols) {}

Conv1dLayer::Conv1dLayer(int ci, int co, int kk, int d)
    : c_in(ci), c_out(co), k(kk), dilation(d), kernel(Matrix(co, ci * kk)), bias(Matrix(co, 1)) {
  validate();
}

void Conv1dLayer::init(CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(c_in * k));
  for (double& w : kernel.value.v) w = bound * (2.0 * rng.uniform() - 1.0);
  bias.value.fill(0.0);
}

void Conv1dLayer::validate() const {
  if (c_in < 1 || c_out < 1 || k < 1 || dilation < 1)
    throw ShapeError("Conv1dLayer: channels, kernel size and dilation must be >= 1");
  if (kernel.value.rows != c_out || kernel.value.cols != c_in * k || bias.value.rows != c_out ||
      bias.value.cols != 1)
    throw ShapeError("Conv1dLayer: parameter shapes do not match metadata");
  for (double w : kernel.value.v)
    if (!std::isfinite(w)) throw std::invalid_argument("Conv1dLayer: non-finite weight");
}

DenseLayer::DenseLayer(int i, int o) : in(i), out(o), weight(Matrix(o, i)), bias(Matrix(o, 1)) {
  validate();
}

void DenseLayer::init(CounterRng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in));
  for (double& w : weight.value.v) w = bound * (2.0 * rng.uniform() - 1.0);
  bias.value.fill(0.0);
}

void DenseLayer::validate() const {
  if (in < 1 || out < 1) throw ShapeError("DenseLayer: sizes must be >= 1");
  if (weight.value.rows != out || weight.value.cols != in || bias.value.rows != out ||
      bias.value.cols != 1)
    throw ShapeError("DenseLayer: parameter shapes do not match metadata");
}

// ---- eager kernels -------------------------------------------------------

Matrix conv1d_causal(const Matrix& x, const Conv1dLayer& L) {
  if (x.rows != L.c_in) throw ShapeError("conv1d_causal: input channels do not match kernel");
  if (x.cols < 1) throw ShapeError("conv1d_causal: empty sequence");
  const int T = x.cols;
  Matrix y(L.c_out, T);
  for (int o = 0; o < L.c_out; ++o) {
    const double b = L.bias.value(o, 0);
    for (int t = 0; t < T; ++t) y(o, t) = b;
    for (int c = 0; c < L.c_in; ++c)
      for (int i = 0; i < L.k; ++i) {
        const double w = L.kernel.value(o, c * L.k + i);
        const int shift = L.dilation * i;
        for (int t = shift; t < T; ++t) y(o, t) += w * x(c, t - shift);
      }
  }
  return y;
}

Matrix dense(const Matrix& x, const DenseLayer& L) {
  if (x.rows != L.in) throw ShapeError("dense: input size mismatch");
  Matrix y(L.out, x.cols);
  for (int o = 0; o < L.out; ++o)
    for (int n = 0; n < x.cols; ++n) {
      double s = L.bias.value(o, 0);
      for (int i = 0; i < L.in; ++i) s += L.weight.value(o, i) * x(i, n);
      y(o, n) = s;
    }
  return y;
}

Matrix relu(Matrix x) {
  for (double& a : x.v) a = a > 0.0 ? a : 0.0;
  return x;
}

Matrix tanh(Matrix x) {
  for (double& a : x.v) a = std::tanh(a);
  return x;
}

Matrix residual_add(Matrix a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("residual_add: shape mismatch");
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

// ---- tape ----------------------------------------------------------------

const Tape::Node& Tape::node(Var v) const {
  if (v < 0 || v >= static_cast<Var>(nodes_.size())) throw std::out_of_range("Tape: unknown node");
  return nodes_[static_cast<std::size_t>(v)];
}
Tape::Node& Tape::node(Var v) {
  if (v < 0 || v >= static_cast<Var>(nodes_.size())) throw std::out_of_range("Tape: unknown node");
  return nodes_[static_cast<std::size_t>(v)];
}

Tape::Var Tape::push(Matrix value, std::function<void()> back) {
  if (consumed_) throw std::logic_error("Tape: cannot record after backward; call clear()");
  Node n;
  n.grad = Matrix(value.rows, value.cols);
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

Tape::Var Tape::input(const Matrix& m) { return push(m); }

Tape::Var Tape::param(Parameter& p) {
  const Var id = push(p.value);
  nodes_.back().param = &p;
  return id;
}

Tape::Var Tape::conv1d_causal(Var x, Conv1dLayer& L) {
  const Var in = x;
  const Var kw = param(L.kernel);
  const Var kb = param(L.bias);
  Matrix y = nn::conv1d_causal(value(in), L);
  Conv1dLayer* lp = &L;
  const Var out = push(std::move(y));
  nodes_.back().back = [this, in, kw, kb, lp, out] {
    const Conv1dLayer& L = *lp;
    const Matrix& gy = nodes_[out].grad;
    const Matrix& xv = nodes_[in].value;
    const Matrix& w = nodes_[kw].value;
    Matrix& gx = nodes_[in].grad;
    Matrix& gw = nodes_[kw].grad;
    Matrix& gb = nodes_[kb].grad;
    const int T = xv.cols;
    for (int o = 0; o < L.c_out; ++o) {
      double sb = 0.0;
      for (int t = 0; t < T; ++t) sb += gy(o, t);
      gb(o, 0) += sb;
      for (int c = 0; c < L.c_in; ++c)
        for (int i = 0; i < L.k; ++i) {
          const int shift = L.dilation * i;
          const int col = c * L.k + i;
          const double wv = w(o, col);
          double sw = 0.0;
          for (int t = shift; t < T; ++t) {
            sw += gy(o, t) * xv(c, t - shift);
            gx(c, t - shift) += gy(o, t) * wv;
          }
          gw(o, col) += sw;
        }
    }
  };
  return out;
}

Tape::Var Tape::dense(Var x, DenseLayer& L) {
  const Var in = x;
  const Var pw = param(L.weight);
  const Var pb = param(L.bias);
  Matrix y = nn::dense(value(in), L);
  const Var out = push(std::move(y));
  nodes_.back().back = [this, in, pw, pb, out] {
    const Matrix& gy = nodes_[out].grad;
    const Matrix& xv = nodes_[in].value;
    const Matrix& w = nodes_[pw].value;
    Matrix& gx = nodes_[in].grad;
    Matrix& gw = nodes_[pw].grad;
    Matrix& gb = nodes_[pb].grad;
    for (int o = 0; o < gy.rows; ++o)
      for (int n = 0; n < gy.cols; ++n) {
        const double g = gy(o, n);
        if (g == 0.0) continue;
        gb(o, 0) += g;
        for (int i = 0; i < xv.rows; ++i) {
          gw(o, i) += g * xv(i, n);
          gx(i, n) += g * w(o, i);
        }
      }
  };
  return out;
}

Tape::Var Tape::relu(Var x) {
  const Var out = push(nn::relu(value(x)));
  nodes_.back().back = [this, x, out] {
    const Matrix& xv = nodes_[x].value;
    const Matrix& gy = nodes_[out].grad;
    Matrix& gx = nodes_[x].grad;
    for (std::size_t i = 0; i < gy.v.size(); ++i)
      if (xv.v[i] > 0.0) gx.v[i] += gy.v[i];
  };
  return out;
}

Tape::Var Tape::tanh(Var x) {
  const Var out = push(nn::tanh(value(x)));
  nodes_.back().back = [this, x, out] {
    const Matrix& yv = nodes_[out].value;
    const Matrix& gy = nodes_[out].grad;
    Matrix& gx = nodes_[x].grad;
    for (std::size_t i = 0; i < gy.v.size(); ++i) gx.v[i] += gy.v[i] * (1.0 - yv.v[i] * yv.v[i]);
  };
  return out;
}

Tape::Var Tape::add(Var a, Var b) {
  const Var out = push(residual_add(value(a), value(b)));
  nodes_.back().back = [this, a, b, out] {
    const Matrix& gy = nodes_[out].grad;
    for (std::size_t i = 0; i < gy.v.size(); ++i) {
      nodes_[a].grad.v[i] += gy.v[i];
      nodes_[b].grad.v[i] += gy.v[i];
    }
  };
  return out;
}

Tape::Var Tape::last_column(Var x) {
  const int c = value(x).cols;
  return slice_cols(x, c - 1, c);
}

Tape::Var Tape::slice_cols(Var x, int from, int to) {
  const Matrix& xv = value(x);
  if (from < 0 || to > xv.cols || from >= to) throw ShapeError("slice_cols: bad column range");
  Matrix y(xv.rows, to - from);
  for (int r = 0; r < xv.rows; ++r)
    for (int c = from; c < to; ++c) y(r, c - from) = xv(r, c);
  const Var out = push(std::move(y));
  nodes_.back().back = [this, x, out, from] {
    const Matrix& gy = nodes_[out].grad;
    Matrix& gx = nodes_[x].grad;
    for (int r = 0; r < gy.rows; ++r)
      for (int c = 0; c < gy.cols; ++c) gx(r, c + from) += gy(r, c);
  };
  return out;
}

Tape::Var Tape::sum(Var x) {
  double s = 0.0;
  for (double a : value(x).v) s += a;
  const Var out = push(Matrix(1, 1, s));
  nodes_.back().back = [this, x, out] {
    const double g = nodes_[out].grad.v[0];
    for (double& gx : nodes_[x].grad.v) gx += g;
  };
  return out;
}

Tape::Var Tape::mse(Var pred, const Matrix& target) {
  const Matrix& p = value(pred);
  if (!p.same_shape(target)) throw ShapeError("mse: shape mismatch");
  if (p.size() == 0) throw ShapeError("mse: empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < p.v.size(); ++i) s += (p.v[i] - target.v[i]) * (p.v[i] - target.v[i]);
  const double n = static_cast<double>(p.size());
  const Var out = push(Matrix(1, 1, s / n));
  nodes_.back().back = [this, pred, out, target, n] {
    const double g = nodes_[out].grad.v[0];
    const Matrix& pv = nodes_[pred].value;
    Matrix& gp = nodes_[pred].grad;
    for (std::size_t i = 0; i < pv.v.size(); ++i) gp.v[i] += g * 2.0 * (pv.v[i] - target.v[i]) / n;
  };
  return out;
}

void Tape::backward(Var loss) {
  const Matrix& v = value(loss);
  if (v.rows != 1 || v.cols != 1) throw ShapeError("backward: loss must be a scalar");
  backward(loss, Matrix(1, 1, 1.0));
}

void Tape::backward(Var out, const Matrix& seed) {
  if (nodes_.empty()) throw std::logic_error("backward: nothing recorded");
  if (consumed_) throw std::logic_error("backward: tape already consumed; run a new forward pass");
  Node& o = node(out);
  if (!o.value.same_shape(seed)) throw ShapeError("backward: seed shape mismatch");
  consumed_ = true;
  for (auto& n : nodes_) n.grad.fill(0.0);
  o.grad = seed;
  for (Var i = out; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back) n.back();
  }
  for (auto& n : nodes_)
    if (n.param)
      for (std::size_t i = 0; i < n.grad.v.size(); ++i) n.param->grad.v[i] += n.grad.v[i];
}

// ---- optimizer -----------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() { step(params_); }

void Adam::step(const std::vector<Parameter*>& params) {
  if (params.size() != m_.size()) throw ShapeError("Adam: parameter list mismatch");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (params[k]->value.size() != m_[k].size()) throw ShapeError("Adam: parameter size mismatch");
  double norm2 = 0.0;
  for (auto* p : params) {
    if (!p->grad.same_shape(p->value)) throw ShapeError("Adam: gradient shape mismatch");
    for (double g : p->grad.v) {
      if (!std::isfinite(g)) throw NonFiniteGradient("Adam: non-finite gradient, step rejected");
      norm2 += g * g;
    }
  }
  double scale = 1.0;
  if (opts_.max_grad_norm > 0.0 && norm2 > opts_.max_grad_norm * opts_.max_grad_norm)
    scale = opts_.max_grad_norm / std::sqrt(norm2);
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& val = params[k]->value.v;
    const auto& grad = params[k]->grad.v;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = grad[i] * scale;
      m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g;
      v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g * g;
      val[i] -= opts_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opts_.eps);
    }
  }
}

// ---- checkpoints ---------------------------------------------------------

std::vector<Parameter*> pointers(const ParamList& params) {
  std::vector<Parameter*> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

nlohmann::json params_to_json(const ParamList& params) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, p] : params)
    tensors.push_back({{"name", name},
                       {"rows", p->value.rows},
                       {"cols", p->value.cols},
                       {"values", p->value.v}});
  return {{"tensors", tensors}};
}

void params_from_json(const nlohmann::json& doc, const ParamList& params) {
  const auto& tensors = doc.at("tensors");
  if (tensors.size() != params.size())
    throw std::invalid_argument("checkpoint: tensor count mismatch");
  std::vector<Matrix> staged;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    const auto& [name, p] = params[i];
    if (t.at("name").get<std::string>() != name)
      throw std::invalid_argument("checkpoint: expected tensor '" + name + "'");
    Matrix m(t.at("rows").get<int>(), t.at("cols").get<int>());
    if (!m.same_shape(p->value)) throw ShapeError("checkpoint: shape mismatch for '" + name + "'");
    m.v = t.at("values").get<std::vector<double>>();
    if (m.v.size() != m.size() || m.v.size() != p->value.size())
      throw ShapeError("checkpoint: value count mismatch for '" + name + "'");
    staged.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].second->value = std::move(staged[i]);
    params[i].second->grad = Matrix(params[i].second->value.rows, params[i].second->value.cols);
  }
}

}  // namespace qkd::nn
