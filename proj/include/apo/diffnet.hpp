#ifndef APO_DIFFNET_HPP
#define APO_DIFFNET_HPP

// Small differentiable models: fully connected networks with linear, ReLU or
// sigmoid activations, plus the two-parameter Rosenbrock "model". Weights are
// stored fan_in x fan_out so a batch forward pass is S = A W + 1 b^T.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "apo/numkit.hpp"

namespace apo {

enum class Activation { linear, relu, sigmoid };
enum class Head { regression, classification, rosenbrock };

struct LayerSpec {
  std::size_t fan_in = 1;
  std::size_t fan_out = 1;
  Activation activation = Activation::linear;
  bool has_bias = true;
};

struct Model {
  std::vector<LayerSpec> layers;
  Head head = Head::regression;

  std::size_t input_dim() const { return head == Head::rosenbrock ? 0 : layers.front().fan_in; }
  std::size_t output_dim() const { return head == Head::rosenbrock ? 1 : layers.back().fan_out; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.fan_in * l.fan_out + (l.has_bias ? l.fan_out : 0);
    return n;
  }

  void validate() const {
    if (layers.empty()) throw ContractError("model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].fan_in == 0 || layers[i].fan_out == 0) {
        throw ContractError("layer " + std::to_string(i) + " has a zero extent");
      }
      if (i > 0 && layers[i - 1].fan_out != layers[i].fan_in) {
        throw DimensionError("layer " + std::to_string(i) + " fan_in does not chain");
      }
    }
    if (head == Head::rosenbrock &&
        (layers.size() != 1 || layers[0].fan_in * layers[0].fan_out != 2 || layers[0].has_bias)) {
      throw ContractError("rosenbrock model must be a single bias-free 2-parameter layer");
    }
  }
};

/// Fully connected network with the given widths; hidden layers use `hidden`,
/// the last layer is linear.
inline Model make_mlp(const std::vector<std::size_t>& widths, Activation hidden, Head head,
                      bool bias = true) {
  if (widths.size() < 2) throw ContractError("make_mlp needs at least two widths");
  Model m;
  m.head = head;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back({widths[i], widths[i + 1], last ? Activation::linear : hidden, bias});
  }
  m.validate();
  return m;
}

inline Model make_rosenbrock_model() {
  Model m;
  m.head = Head::rosenbrock;
  m.layers.push_back({1, 2, Activation::linear, false});
  return m;
}

struct LayerParams {
  Matrix weight;  // fan_in x fan_out
  Vector bias;    // fan_out, or empty
};

/// theta: per-layer weights and biases, flattened as W (row-major) then b.
struct ParamSet {
  std::vector<LayerParams> layers;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  Vector flatten() const {
    Vector v;
    v.reserve(size());
    for (const auto& l : layers) {
      v.insert(v.end(), l.weight.data().begin(), l.weight.data().end());
      v.insert(v.end(), l.bias.begin(), l.bias.end());
    }
    return v;
  }

  /// Overwrites the values in place from a flat vector of matching length.
  void assign(std::span<const double> flat) {
    if (flat.size() != size()) throw DimensionError("ParamSet::assign: length mismatch");
    std::size_t k = 0;
    for (auto& l : layers) {
      for (auto& x : l.weight.data()) x = flat[k++];
      for (auto& x : l.bias) x = flat[k++];
    }
  }

  ParamSet zeros_like() const {
    ParamSet z = *this;
    for (auto& l : z.layers) {
      l.weight *= 0.0;
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return z;
  }

  /// this += s * o
  void axpy(double s, const ParamSet& o) {
    if (o.layers.size() != layers.size()) throw DimensionError("ParamSet::axpy: layer count");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].weight.axpy(s, o.layers[i].weight);
      if (layers[i].bias.size() != o.layers[i].bias.size()) throw DimensionError("ParamSet::axpy: bias");
      for (std::size_t j = 0; j < layers[i].bias.size(); ++j) layers[i].bias[j] += s * o.layers[i].bias[j];
    }
  }

  bool finite() const {
    for (const auto& l : layers)
      if (!all_finite(l.weight) || !all_finite(l.bias)) return false;
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i)
      if (!(a.layers[i].weight == b.layers[i].weight) || a.layers[i].bias != b.layers[i].bias) return false;
    return true;
  }
};

inline ParamSet zero_params(const Model& model) {
  ParamSet p;
  for (const auto& l : model.layers) {
    p.layers.push_back({Matrix(l.fan_in, l.fan_out), Vector(l.has_bias ? l.fan_out : 0, 0.0)});
  }
  return p;
}

/// Fan-in scaled uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ParamSet init_params(const Model& model, Rng& rng) {
  model.validate();
  ParamSet p = zero_params(model);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const double r = 1.0 / std::sqrt(static_cast<double>(model.layers[i].fan_in));
    for (auto& x : p.layers[i].weight.data()) x = rng.uniform(-r, r);
    for (auto& x : p.layers[i].bias) x = rng.uniform(-r, r);
  }
  return p;
}

inline void check_conformant(const Model& model, const ParamSet& params) {
  if (params.layers.size() != model.layers.size()) {
    throw DimensionError("parameter set has " + std::to_string(params.layers.size()) +
                         " layers, model has " + std::to_string(model.layers.size()));
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& s = model.layers[i];
    const auto& p = params.layers[i];
    if (p.weight.rows() != s.fan_in || p.weight.cols() != s.fan_out ||
        p.bias.size() != (s.has_bias ? s.fan_out : 0)) {
      throw DimensionError("layer " + std::to_string(i) + " parameters do not match the model");
    }
  }
}

/// Inputs are B x d_in; targets are B x d_out (regression) or B labels.
struct Batch {
  Matrix inputs;
  Matrix targets;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.rows(); }
};

/// Pre-activations s_l and activations a_l; post[0] is the input.
struct ForwardTrace {
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
};

inline double rosenbrock_value(double x, double y) {
  return (1.0 - x) * (1.0 - x) + 100.0 * (y - x * x) * (y - x * x);
}

namespace detail {

inline double activate(Activation a, double s) {
  switch (a) {
    case Activation::linear: return s;
    case Activation::relu: return s > 0.0 ? s : 0.0;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-s));
  }
  return s;
}

// Derivative expressed through (s, a); ReLU uses 0 at the kink.
inline double activate_deriv(Activation a, double s, double out) {
  switch (a) {
    case Activation::linear: return 1.0;
    case Activation::relu: return s > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return out * (1.0 - out);
  }
  return 1.0;
}

}  // namespace detail

/// y = f(x, theta) for every row of `inputs`. The Rosenbrock model ignores its
/// inputs and emits f(theta) once per row.
inline std::pair<Matrix, ForwardTrace> forward(const Model& model, const ParamSet& params,
                                               const Matrix& inputs) {
  check_conformant(model, params);
  ForwardTrace trace;
  if (model.head == Head::rosenbrock) {
    const auto w = params.layers[0].weight.data();
    Matrix out(inputs.rows(), 1, rosenbrock_value(w[0], w[1]));
    if (!all_finite(out)) throw NumericalError("forward: non-finite output");
    trace.post.push_back(inputs);
    return {out, std::move(trace)};
  }
  if (inputs.cols() != model.input_dim()) {
    throw DimensionError("forward: inputs have " + std::to_string(inputs.cols()) +
                         " columns, model expects " + std::to_string(model.input_dim()));
  }
  trace.post.reserve(model.layers.size() + 1);
  trace.pre.reserve(model.layers.size());
  trace.post.push_back(inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Matrix s = matmul(trace.post.back(), params.layers[l].weight);
    const Vector& b = params.layers[l].bias;
    if (!b.empty())
      for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = 0; j < s.cols(); ++j) s(i, j) += b[j];
    Matrix a = s;
    const Activation act = model.layers[l].activation;
    if (act != Activation::linear)
      for (auto& x : a.data()) x = detail::activate(act, x);
    trace.pre.push_back(std::move(s));
    trace.post.push_back(std::move(a));
  }
  Matrix out = trace.post.back();
  if (!all_finite(out)) throw NumericalError("forward: non-finite output");
  return {std::move(out), std::move(trace)};
}

inline Matrix predict(const Model& model, const ParamSet& params, const Matrix& inputs) {
  return forward(model, params, inputs).first;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    double mx = r[0];
    for (double x : r) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : r) z += (x = std::exp(x - mx));
    for (double& x : r) x /= z;
  }
  return p;
}

inline Vector log_softmax_row(std::span<const double> z) {
  double mx = z[0];
  for (double x : z) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : z) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  Vector out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] - lse;
  return out;
}

/// Predictive distribution parameters: softmax probabilities for
/// classification, the outputs themselves (unit-variance Gaussian means)
/// otherwise.
inline Matrix predictive(Head head, const Matrix& outputs) {
  return head == Head::classification ? softmax_rows(outputs) : outputs;
}

namespace detail {

inline void check_targets(Head head, const Matrix& outputs, const Batch& batch) {
  if (outputs.rows() == 0) throw ContractError("loss: empty batch");
  if (head == Head::classification) {
    if (batch.labels.size() != outputs.rows()) throw DimensionError("loss: label count mismatch");
    for (std::size_t i = 0; i < batch.labels.size(); ++i)
      if (batch.labels[i] >= outputs.cols()) {
        throw ContractError("loss: label " + std::to_string(batch.labels[i]) + " out of range at row " +
                            std::to_string(i));
      }
  } else if (head == Head::regression) {
    if (batch.targets.rows() != outputs.rows() || batch.targets.cols() != outputs.cols()) {
      throw DimensionError("loss: targets " + batch.targets.shape_string() + " vs outputs " +
                           outputs.shape_string());
    }
  }
}

}  // namespace detail

/// Batch-mean loss: squared error ||y - t||^2, softmax cross-entropy, or the
/// Rosenbrock value itself.
inline double loss_eval(Head head, const Matrix& outputs, const Batch& batch) {
  detail::check_targets(head, outputs, batch);
  const double inv_b = 1.0 / static_cast<double>(outputs.rows());
  double total = 0.0;
  switch (head) {
    case Head::regression:
      for (std::size_t k = 0; k < outputs.size(); ++k) {
        const double r = outputs.data()[k] - batch.targets.data()[k];
        total += r * r;
      }
      break;
    case Head::classification:
      for (std::size_t i = 0; i < outputs.rows(); ++i) total -= log_softmax_row(outputs.row(i))[batch.labels[i]];
      break;
    case Head::rosenbrock:
      for (double x : outputs.data()) total += x;
      break;
  }
  return total * inv_b;
}

/// dL/dY for the batch-mean loss.
inline Matrix loss_output_grad(Head head, const Matrix& outputs, const Batch& batch) {
  detail::check_targets(head, outputs, batch);
  const double inv_b = 1.0 / static_cast<double>(outputs.rows());
  Matrix g(outputs.rows(), outputs.cols());
  switch (head) {
    case Head::regression:
      for (std::size_t k = 0; k < outputs.size(); ++k)
        g.data()[k] = 2.0 * (outputs.data()[k] - batch.targets.data()[k]) * inv_b;
      break;
    case Head::classification: {
      g = softmax_rows(outputs);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        g(i, batch.labels[i]) -= 1.0;
        for (auto& x : g.row(i)) x *= inv_b;
      }
      break;
    }
    case Head::rosenbrock:
      for (auto& x : g.data()) x = inv_b;
      break;
  }
  return g;
}

/// Reverse-mode pass: gradient of <dY, f(X, theta)> with respect to theta.
inline ParamSet backward(const Model& model, const ParamSet& params, const ForwardTrace& trace,
                         const Matrix& d_out) {
  ParamSet grad = zero_params(model);
  if (model.head == Head::rosenbrock) {
    const auto w = params.layers[0].weight.data();
    const double x = w[0], y = w[1];
    double s = 0.0;
    for (double v : d_out.data()) s += v;
    auto gw = grad.layers[0].weight.data();
    gw[0] = s * (-2.0 * (1.0 - x) - 400.0 * x * (y - x * x));
    gw[1] = s * (200.0 * (y - x * x));
    return grad;
  }
  Matrix delta = d_out;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const Activation act = model.layers[l].activation;
    if (act != Activation::linear) {
      const Matrix& s = trace.pre[l];
      const Matrix& a = trace.post[l + 1];
      for (std::size_t k = 0; k < delta.size(); ++k)
        delta.data()[k] *= detail::activate_deriv(act, s.data()[k], a.data()[k]);
    }
    grad.layers[l].weight = matmul_tn(trace.post[l], delta);
    if (model.layers[l].has_bias) {
      auto& gb = grad.layers[l].bias;
      for (std::size_t i = 0; i < delta.rows(); ++i)
        for (std::size_t j = 0; j < delta.cols(); ++j) gb[j] += delta(i, j);
    }
    if (l > 0) delta = matmul_nt(delta, params.layers[l].weight);
  }
  return grad;
}

struct LossAndGrad {
  double loss = 0.0;
  ParamSet grad;
};

inline LossAndGrad loss_and_grad(const Model& model, const ParamSet& params, const Batch& batch) {
  auto [out, trace] = forward(model, params, batch.inputs);
  LossAndGrad r{loss_eval(model.head, out, batch), {}};
  r.grad = backward(model, params, trace, loss_output_grad(model.head, out, batch));
  if (!r.grad.finite()) throw NumericalError("grad_params: non-finite gradient");
  return r;
}

inline ParamSet grad_params(const Model& model, const ParamSet& params, const Batch& batch) {
  return loss_and_grad(model, params, batch).grad;
}

inline double batch_loss(const Model& model, const ParamSet& params, const Batch& batch) {
  return loss_eval(model.head, predict(model, params, batch.inputs), batch);
}

inline constexpr std::size_t kJacobianParamLimit = 2000;

/// Per-example Jacobians dy_b/dtheta, each d_out x m with columns in
/// ParamSet::flatten order.
inline std::vector<Matrix> per_example_jacobian(const Model& model, const ParamSet& params,
                                                const Matrix& inputs) {
  const std::size_t m = model.num_params();
  if (m > kJacobianParamLimit) {
    throw OracleScaleError("per_example_jacobian: " + std::to_string(m) + " parameters exceed 2000");
  }
  const std::size_t d_out = model.output_dim();
  std::vector<Matrix> jac;
  jac.reserve(inputs.rows());
  for (std::size_t b = 0; b < inputs.rows(); ++b) {
    Matrix x(1, inputs.cols());
    for (std::size_t j = 0; j < inputs.cols(); ++j) x(0, j) = inputs(b, j);
    const auto [out, trace] = forward(model, params, x);
    Matrix jb(d_out, m);
    for (std::size_t k = 0; k < d_out; ++k) {
      Matrix e(1, d_out);
      e(0, k) = 1.0;
      const Vector row = backward(model, params, trace, e).flatten();
      for (std::size_t p = 0; p < m; ++p) jb(k, p) = row[p];
    }
    jac.push_back(std::move(jb));
  }
  return jac;
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline std::string to_string(Head h) {
  switch (h) {
    case Head::regression: return "regression";
    case Head::classification: return "classification";
    case Head::rosenbrock: return "rosenbrock";
  }
  return "?";
}

}  // namespace apo

#endif  // APO_DIFFNET_HPP
