#pragma once

// Small reverse-mode autodiff kit: dense and dilated causal conv layers,
// elementwise activations, residual adds and Adam.
//
// Tensors are row-major (rows, cols) matrices of doubles. Sequence tensors use
// rows = channels, cols = time; batched dense inputs use cols = batch.

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "qkd/rng.hpp"

namespace qkd::nn {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);
  static Matrix column(const std::vector<double>& values);

  double& operator()(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double x);
  bool operator==(const Matrix&) const = default;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Trainable tensor with its gradient accumulator.
struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix m);
  void zero_grad() { grad.fill(0.0); }
};

/// Kernel layout: kernel(o, c*k + i) multiplies x(c, t - dilation*i).
struct Conv1dLayer {
  int c_in = 1;
  int c_out = 1;
  int k = 1;
  int dilation = 1;
  Parameter kernel;  ///< (c_out, c_in*k)
  Parameter bias;    ///< (c_out, 1)

  Conv1dLayer() = default;
  Conv1dLayer(int c_in, int c_out, int k, int dilation);
  void init(CounterRng& rng);  ///< Kaiming-uniform kernel, zero bias
  void validate() const;
};

/// y = W x + b, column by column.
struct DenseLayer {
  int in = 1;
  int out = 1;
  Parameter weight;  ///< (out, in)
  Parameter bias;    ///< (out, 1)

  DenseLayer() = default;
  DenseLayer(int in, int out);
  void init(CounterRng& rng, double gain = 1.0);
  void validate() const;
};

/// Recorded computation. Nodes are created by the forward ops and consumed by
/// a single backward pass.
class Tape {
 public:
  using Var = int;

  Var input(const Matrix& m);
  Var param(Parameter& p);

  Var conv1d_causal(Var x, Conv1dLayer& layer);
  Var dense(Var x, DenseLayer& layer);
  Var relu(Var x);
  Var tanh(Var x);
  Var add(Var a, Var b);
  Var last_column(Var x);
  /// Columns [from, to).
  Var slice_cols(Var x, int from, int to);
  Var sum(Var x);
  /// Mean over all entries of (pred - target)^2.
  Var mse(Var pred, const Matrix& target);

  const Matrix& value(Var v) const { return node(v).value; }
  const Matrix& grad(Var v) const { return node(v).grad; }

  /// Backpropagates from a scalar node with seed 1. Node grads restart from
  /// zero; Parameter::grad accumulates until zero_grad().
  void backward(Var loss);
  /// Backpropagates an arbitrary upstream gradient into `out`.
  void backward(Var out, const Matrix& seed);

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    std::function<void()> back;
  };
  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Matrix value, std::function<void()> back = {});

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Eager (tape-free) equivalents for inference.
Matrix conv1d_causal(const Matrix& x, const Conv1dLayer& layer);
Matrix dense(const Matrix& x, const DenseLayer& layer);
Matrix relu(Matrix x);
Matrix tanh(Matrix x);
Matrix residual_add(Matrix a, const Matrix& b);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  ///< global norm clip; 0 disables
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opts = {});
  /// Applies one update from the accumulated grads. A non-finite gradient
  /// leaves every parameter untouched and throws NonFiniteGradient.
  void step();
  /// Same update on an explicit list matching the construction order; lets an
  /// owner that may be copied or moved avoid the stored pointers.
  void step(const std::vector<Parameter*>& params);
  void zero_grad();
  long steps() const { return t_; }
  AdamOptions& options() { return opts_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opts_;
  long t_ = 0;
};

/// Named parameter list used for checkpoints and optimizers.
using ParamList = std::vector<std::pair<std::string, Parameter*>>;
std::vector<Parameter*> pointers(const ParamList& params);

/// {"tensors": [{"name", "rows", "cols", "values"}...]}; doubles round-trip exactly.
nlohmann::json params_to_json(const ParamList& params);
/// Loads values in place; names and shapes must match.
void params_from_json(const nlohmann::json& doc, const ParamList& params);

}  // namespace qkd::nn
