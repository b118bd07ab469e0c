#ifndef APO_KRONPRECOND_HPP
#define APO_KRONPRECOND_HPP

// Kronecker-structured preconditioner
//
//   P = (A (x) B) diag(vec(S))^2 (A (x) B)^T
//
// for a weight matrix W of shape m_in x m_out, with A: m_out x m_out,
// B: m_in x m_in, S: m_in x m_out. Under the column-stacking vec convention
// the product P vec(G) is
//
//   vec( B (S o S o (B^T G A)) A^T ),
//
// four small matrix products and one elementwise product. P is PSD for any A,
// B, S since it has the form C D C^T with D diagonal and nonnegative.
//
// Biases are preconditioned by an independent diagonal d o d o g_b.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "apo/diffnet.hpp"
#include "apo/numkit.hpp"

namespace apo {

struct KronBlocks {
  Matrix a;  // m_out x m_out
  Matrix b;  // m_in x m_in
  Matrix s;  // m_in x m_out

  std::size_t fan_in() const { return s.rows(); }
  std::size_t fan_out() const { return s.cols(); }
  std::size_t num_params() const { return a.size() + b.size() + s.size(); }

  void validate() const {
    if (a.rows() != s.cols() || a.cols() != s.cols() || b.rows() != s.rows() || b.cols() != s.rows()) {
      throw DimensionError("KronBlocks: A " + a.shape_string() + ", B " + b.shape_string() + ", S " +
                           s.shape_string() + " are inconsistent");
    }
  }

  static KronBlocks identity(std::size_t fan_in, std::size_t fan_out) {
    return {Matrix::identity(fan_out), Matrix::identity(fan_in), Matrix(fan_in, fan_out, 1.0)};
  }
};

/// B (S^2 o B^T G A) A^T
inline Matrix apply_precond(const KronBlocks& k, const Matrix& grad_w) {
  k.validate();
  if (grad_w.rows() != k.fan_in() || grad_w.cols() != k.fan_out()) {
    throw DimensionError("apply_precond: gradient " + grad_w.shape_string() + " vs blocks for " +
                         k.s.shape_string());
  }
  Matrix inner = matmul(matmul_tn(k.b, grad_w), k.a);
  for (std::size_t i = 0; i < inner.size(); ++i) inner.data()[i] *= k.s.data()[i] * k.s.data()[i];
  return matmul_nt(matmul(k.b, inner), k.a);
}

inline constexpr std::size_t kDensePrecondLimit = 64;

/// Materialized (m_in m_out)^2 preconditioner; oracle use only (m_in m_out <= 64).
inline Matrix dense_precond(const KronBlocks& k) {
  k.validate();
  const std::size_t n = k.s.size();
  if (n > kDensePrecondLimit) {
    throw OracleScaleError("dense_precond: layer with " + std::to_string(n) + " weights exceeds 64");
  }
  const Matrix c = kron_dense(k.a, k.b);
  const Vector sv = vec_cm(k.s);
  Matrix cd = c;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cd(i, j) *= sv[j] * sv[j];
  return matmul_nt(cd, c);
}

/// Learned preconditioner for every layer plus the fixed output scale c.
struct PrecondPhi {
  std::vector<KronBlocks> blocks;
  std::vector<Vector> bias_diag;  // per layer, empty when the layer has no bias
  double scale = 0.9;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& k : blocks) n += k.num_params();
    for (const auto& d : bias_diag) n += d.size();
    return n;
  }

  /// Flat order per layer: A, B, S (row-major), then the bias diagonal.
  Vector flatten() const {
    Vector v;
    v.reserve(num_params());
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      for (const Matrix* m : {&blocks[l].a, &blocks[l].b, &blocks[l].s})
        v.insert(v.end(), m->data().begin(), m->data().end());
      v.insert(v.end(), bias_diag[l].begin(), bias_diag[l].end());
    }
    return v;
  }

  void assign(std::span<const double> flat) {
    if (flat.size() != num_params()) throw DimensionError("PrecondPhi::assign: length mismatch");
    std::size_t k = 0;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      for (Matrix* m : {&blocks[l].a, &blocks[l].b, &blocks[l].s})
        for (auto& x : m->data()) x = flat[k++];
      for (auto& x : bias_diag[l]) x = flat[k++];
    }
  }

  double frobenius_norm() const { return norm2(flatten()); }

  friend bool operator==(const PrecondPhi& x, const PrecondPhi& y) {
    if (x.scale != y.scale || x.bias_diag != y.bias_diag || x.blocks.size() != y.blocks.size()) return false;
    for (std::size_t l = 0; l < x.blocks.size(); ++l)
      if (!(x.blocks[l].a == y.blocks[l].a) || !(x.blocks[l].b == y.blocks[l].b) ||
          !(x.blocks[l].s == y.blocks[l].s))
        return false;
    return true;
  }
};

/// A = I, B = I, S = 1, bias diagonal = 1: the identity preconditioner.
inline PrecondPhi init_identity(const Model& model, double scale = 0.9) {
  model.validate();
  PrecondPhi phi;
  phi.scale = scale;
  for (const auto& l : model.layers) {
    phi.blocks.push_back(KronBlocks::identity(l.fan_in, l.fan_out));
    phi.bias_diag.emplace_back(l.has_bias ? l.fan_out : 0, 1.0);
  }
  return phi;
}

inline void check_conformant(const PrecondPhi& phi, const ParamSet& params) {
  if (phi.blocks.size() != params.layers.size() || phi.bias_diag.size() != params.layers.size()) {
    throw DimensionError("preconditioner has a different layer count than the parameters");
  }
  for (std::size_t l = 0; l < phi.blocks.size(); ++l) {
    phi.blocks[l].validate();
    if (phi.blocks[l].s.rows() != params.layers[l].weight.rows() ||
        phi.blocks[l].s.cols() != params.layers[l].weight.cols() ||
        phi.bias_diag[l].size() != params.layers[l].bias.size()) {
      throw DimensionError("preconditioner layer " + std::to_string(l) + " does not match the parameters");
    }
  }
}

/// P applied layerwise to a gradient (no scale).
inline ParamSet precondition(const PrecondPhi& phi, const ParamSet& grad) {
  check_conformant(phi, grad);
  ParamSet out = grad;
  for (std::size_t l = 0; l < grad.layers.size(); ++l) {
    out.layers[l].weight = apply_precond(phi.blocks[l], grad.layers[l].weight);
    const Vector& d = phi.bias_diag[l];
    for (std::size_t j = 0; j < d.size(); ++j) out.layers[l].bias[j] *= d[j] * d[j];
  }
  return out;
}

/// theta' = theta - c * P g.
inline ParamSet apply_precond_update(const ParamSet& theta, const PrecondPhi& phi, const ParamSet& grad) {
  ParamSet out = theta;
  out.axpy(-phi.scale, precondition(phi, grad));
  if (!out.finite()) throw NumericalError("apply_precond_update: non-finite parameters");
  return out;
}

/// Vector-Jacobian product of apply_precond with respect to (A, B, S):
/// given dL/dM for M = apply_precond(k, G), returns dL/dA, dL/dB, dL/dS.
inline KronBlocks apply_precond_vjp(const KronBlocks& k, const Matrix& grad_w, const Matrix& upstream) {
  const Matrix x = matmul(matmul_tn(k.b, grad_w), k.a);  // B^T G A
  Matrix y = x;                                           // S^2 o X
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] *= k.s.data()[i] * k.s.data()[i];
  const Matrix dy = matmul(matmul_tn(k.b, upstream), k.a);  // B^T U A
  Matrix dx = dy;
  KronBlocks d{Matrix(k.a.rows(), k.a.cols()), Matrix(k.b.rows(), k.b.cols()), Matrix(k.s.rows(), k.s.cols())};
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double si = k.s.data()[i];
    d.s.data()[i] = 2.0 * si * dy.data()[i] * x.data()[i];
    dx.data()[i] *= si * si;
  }
  // M = B Y A^T and X = B^T G A each contribute to dA and dB.
  d.a = matmul(matmul_tn(upstream, k.b), y) + matmul(matmul_tn(grad_w, k.b), dx);
  d.b = matmul_nt(matmul(upstream, k.a), y) + matmul_nt(matmul(grad_w, k.a), dx);
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoint format: {"scale": c, "layers": {"layer0": {"A": {"rows", "cols",
// "data"}, "B": ..., "S": ..., "bias_diag": [...]}, ...}}, data row-major.

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

inline std::string layer_name(std::size_t l) { return "layer" + std::to_string(l); }

inline nlohmann::json to_json(const PrecondPhi& phi) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t l = 0; l < phi.blocks.size(); ++l) {
    layers[layer_name(l)] = {{"A", matrix_to_json(phi.blocks[l].a)},
                             {"B", matrix_to_json(phi.blocks[l].b)},
                             {"S", matrix_to_json(phi.blocks[l].s)},
                             {"bias_diag", phi.bias_diag[l]}};
  }
  return {{"scale", phi.scale}, {"layers", layers}};
}

inline PrecondPhi precond_from_json(const nlohmann::json& j) {
  PrecondPhi phi;
  phi.scale = j.at("scale").get<double>();
  const auto& layers = j.at("layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& e = layers.at(layer_name(l));
    KronBlocks k{matrix_from_json(e.at("A")), matrix_from_json(e.at("B")), matrix_from_json(e.at("S"))};
    k.validate();
    phi.blocks.push_back(std::move(k));
    phi.bias_diag.push_back(e.at("bias_diag").get<Vector>());
  }
  return phi;
}

}  // namespace apo

#endif  // APO_KRONPRECOND_HPP
