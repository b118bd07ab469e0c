#ifndef APO_ORACLES_HPP
#define APO_ORACLES_HPP

// Reference solvers used to cross-check the meta-learned optimizers: the
// exact and linearized proximal point updates, damped Newton, the optimal
// dense preconditioner of the quadratic meta-objective, and KFAC.
//
// Everything here materializes dense curvature and is meant for small models.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "apo/baseopt.hpp"
#include "apo/diffnet.hpp"
#include "apo/kronprecond.hpp"
#include "apo/meta.hpp"
#include "apo/numkit.hpp"

namespace apo {

// ---------------------------------------------------------------------------
// Reports

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::string detail;
};

struct Report {
  std::vector<CheckResult> checks;

  bool all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
  void add(std::string name, double measured, double threshold, bool pass, std::string detail = {}) {
    checks.push_back({std::move(name), measured, threshold, pass, std::move(detail)});
  }
  void append(const Report& other) { checks.insert(checks.end(), other.checks.begin(), other.checks.end()); }
};

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    nlohmann::json j = {{"name", c.name}, {"measured", c.measured}, {"threshold", c.threshold}, {"pass", c.pass}};
    if (!c.detail.empty()) j["detail"] = c.detail;
    checks.push_back(std::move(j));
  }
  return {{"pass", r.all_pass()}, {"checks", checks}};
}

// ---------------------------------------------------------------------------
// FSD curvature

inline constexpr std::size_t kFsdHessianLimit = 2000;

/// Output-space Hessian of rho at y' = y for one example.
inline Matrix fsd_output_hessian(FsdKind kind, std::span<const double> outputs) {
  const std::size_t k = outputs.size();
  switch (kind) {
    case FsdKind::kl_gaussian: return Matrix::identity(k);
    case FsdKind::squared_distance: return 2.0 * Matrix::identity(k);
    case FsdKind::kl_categorical: {
      Matrix z(1, k, std::vector<double>(outputs.begin(), outputs.end()));
      const Matrix p = softmax_rows(z);
      Matrix h(k, k);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) h(i, j) = (i == j ? p(0, i) : 0.0) - p(0, i) * p(0, j);
      return h;
    }
  }
  return Matrix::identity(k);
}

/// G = mean_x J^T H_rho J, columns in ParamSet::flatten order.
inline Matrix fsd_hessian_exact(const Model& model, const ParamSet& params, const Matrix& inputs, FsdKind kind) {
  const std::size_t m = model.num_params();
  if (m > kFsdHessianLimit) throw OracleScaleError("fsd_hessian_exact: " + std::to_string(m) + " parameters exceed 2000");
  if (inputs.rows() == 0) throw ContractError("fsd_hessian_exact: empty dataset");
  const Matrix outputs = predict(model, params, inputs);
  const std::vector<Matrix> jac = per_example_jacobian(model, params, inputs);
  Matrix g(m, m);
  for (std::size_t b = 0; b < jac.size(); ++b) {
    const Matrix h = fsd_output_hessian(kind, outputs.row(b));
    g += matmul_tn(jac[b], matmul(h, jac[b]));
  }
  g *= 1.0 / static_cast<double>(jac.size());
  return symmetrize(g);
}

/// Monte-Carlo Fisher for a softmax head: mean over examples and sampled labels
/// of s s^T with s = grad_theta log p(y | x). Also returns entrywise standard
/// errors over the draws.
struct SampledFisher {
  Matrix mean;
  Matrix std_error;
};

inline SampledFisher sampled_fisher(const Model& model, const ParamSet& params, const Matrix& inputs,
                                    std::size_t samples, Rng& rng) {
  if (model.head != Head::classification) throw ContractError("sampled_fisher: needs a classification head");
  if (inputs.rows() == 0 || samples == 0) throw ContractError("sampled_fisher: nothing to sample");
  const std::size_t m = model.num_params();
  const Matrix probs = softmax_rows(predict(model, params, inputs));
  const std::vector<Matrix> jac = per_example_jacobian(model, params, inputs);
  Matrix sum(m, m), sum_sq(m, m);
  Vector s(m);
  for (std::size_t n = 0; n < samples; ++n) {
    const std::size_t b = n % inputs.rows();
    double u = rng.uniform();
    std::size_t y = 0;
    while (y + 1 < probs.cols() && u >= probs(b, y)) u -= probs(b, y++);
    // d log p_y / d z = e_y - p
    for (std::size_t p = 0; p < m; ++p) {
      double acc = 0.0;
      for (std::size_t k = 0; k < probs.cols(); ++k) acc += ((k == y ? 1.0 : 0.0) - probs(b, k)) * jac[b](k, p);
      s[p] = acc;
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double v = s[i] * s[j];
        sum(i, j) += v;
        sum_sq(i, j) += v * v;
      }
  }
  const double n = static_cast<double>(samples);
  SampledFisher f{sum * (1.0 / n), Matrix(m, m)};
  for (std::size_t k = 0; k < f.mean.size(); ++k) {
    const double mu = f.mean.data()[k];
    const double var = std::max(0.0, sum_sq.data()[k] / n - mu * mu);
    f.std_error.data()[k] = std::sqrt(var / n);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Optimal dense preconditioner of the quadratic meta-objective

inline Matrix regularized_curvature(const Matrix& g, double lambda_fsd, double lambda_wsd) {
  require_square(g, "regularized_curvature");
  if (lambda_fsd < 0.0 || lambda_wsd < 0.0) throw ContractError("lambdas must be nonnegative");
  Matrix c = lambda_fsd * g;
  for (std::size_t i = 0; i < c.rows(); ++i) c(i, i) += lambda_wsd;
  return c;
}

/// P* = (lambda_fsd G + lambda_wsd I)^{-1}
inline Matrix optimal_dense_precond(const Matrix& g, double lambda_fsd, double lambda_wsd) {
  const Matrix c = regularized_curvature(g, lambda_fsd, lambda_wsd);
  if (c.rows() > kSolveLimit) throw OracleScaleError("optimal_dense_precond: matrix too large");
  try {
    return inverse_spd(c);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("optimal_dense_precond: regularized curvature is not SPD (") + e.what() + ")",
                         e.index());
  }
}

/// Second moment E[g g^T] of gradient samples stored as rows.
inline Matrix second_moment(const Matrix& grads) {
  if (grads.rows() == 0) throw ContractError("second_moment: no samples");
  return matmul_tn(grads, grads) * (1.0 / static_cast<double>(grads.rows()));
}

/// Qhat(P) = mean_g [ -g^T P g + lambda_fsd/2 g^T P^T G P g + lambda_wsd/2 g^T P^T P g ]
inline double quadratic_meta_objective(const Matrix& p, const Matrix& g, const Matrix& grads, double lambda_fsd,
                                       double lambda_wsd) {
  double total = 0.0;
  for (std::size_t i = 0; i < grads.rows(); ++i) {
    const Vector pg = matvec(p, grads.row(i));
    total += -dot(grads.row(i), pg) + 0.5 * lambda_fsd * dot(pg, matvec(g, pg)) + 0.5 * lambda_wsd * dot(pg, pg);
  }
  return total / static_cast<double>(grads.rows());
}

/// d Qhat / d P = (lambda_fsd G P + lambda_wsd P - I) E[g g^T]
inline Matrix quadratic_meta_gradient(const Matrix& p, const Matrix& g, const Matrix& grads, double lambda_fsd,
                                      double lambda_wsd) {
  Matrix c = matmul(regularized_curvature(g, lambda_fsd, lambda_wsd), p);
  for (std::size_t i = 0; i < c.rows(); ++i) c(i, i) -= 1.0;
  return matmul(c, second_moment(grads));
}

inline constexpr std::size_t kOptimalPrecondLimit = 12;

/// Checks that P* (or `candidate`, when given) is a stationary point and a
/// local minimizer of Qhat.
inline Report verify_thm1(const Matrix& g, const Matrix& grads, double lambda_fsd, double lambda_wsd, Rng& rng,
                          const std::optional<Matrix>& candidate = std::nullopt) {
  require_square(g, "verify_thm1");
  const std::size_t m = g.rows();
  if (m > kOptimalPrecondLimit) throw OracleScaleError("verify_thm1: dimension above 12");
  if (grads.cols() != m) throw DimensionError("verify_thm1: gradient samples have the wrong width");
  const Matrix mom = second_moment(grads);
  const SymEig e = sym_eig(mom);
  if (!(e.values.front() > 1e-12 * std::max(1.0, e.values.back()))) {
    throw ContractError("verify_thm1: second moment of the gradients is singular");
  }
  const Matrix p = candidate ? *candidate : optimal_dense_precond(g, lambda_fsd, lambda_wsd);

  Report r;
  const double grad_norm = max_abs(quadratic_meta_gradient(p, g, grads, lambda_fsd, lambda_wsd));
  r.add("optimal_precond_stationary", grad_norm, 1e-8, grad_norm <= 1e-8);

  const double q0 = quadratic_meta_objective(p, g, grads, lambda_fsd, lambda_wsd);
  double worst = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 100; ++k) {
    Matrix d = random_normal(rng, m, m);
    d *= 1e-3 / frobenius(d);
    worst = std::min(worst, quadratic_meta_objective(p + d, g, grads, lambda_fsd, lambda_wsd) - q0);
  }
  r.add("optimal_precond_local_minimum", worst, 0.0, worst >= 0.0, "min over 100 perturbations of Qhat(P + d) - Qhat(P)");
  return r;
}

// ---------------------------------------------------------------------------
// Closed-form proximal steps

/// theta - (lambda_fsd G + lambda_wsd I)^{-1} g
inline Vector approx_ppm_update(std::span<const double> theta, std::span<const double> grad, const Matrix& g,
                                double lambda_fsd, double lambda_wsd) {
  if (theta.size() != grad.size() || g.rows() != grad.size()) throw DimensionError("approx_ppm_update: size mismatch");
  const Vector step = solve_spd(regularized_curvature(g, lambda_fsd, lambda_wsd), grad);
  return apply_lr_update(theta, 1.0, step);
}

inline ParamSet approx_ppm_update(const ParamSet& theta, const ParamSet& grad, const Matrix& g, double lambda_fsd,
                                  double lambda_wsd) {
  ParamSet out = theta;
  out.assign(approx_ppm_update(theta.flatten(), grad.flatten(), g, lambda_fsd, lambda_wsd));
  return out;
}

/// theta - (H + lambda_wsd I)^{-1} g
inline Vector damped_newton_update(std::span<const double> theta, std::span<const double> grad, const Matrix& h,
                                   double lambda_wsd) {
  if (theta.size() != grad.size() || h.rows() != grad.size()) throw DimensionError("damped_newton_update: size mismatch");
  const Vector step = solve_spd(regularized_curvature(h, 1.0, lambda_wsd), grad);
  return apply_lr_update(theta, 1.0, step);
}

inline ParamSet damped_newton_update(const ParamSet& theta, const ParamSet& grad, const Matrix& h, double lambda_wsd) {
  ParamSet out = theta;
  out.assign(damped_newton_update(theta.flatten(), grad.flatten(), h, lambda_wsd));
  return out;
}

/// Loss Hessian by central differences of the analytic gradient, symmetrized.
inline Matrix loss_hessian_fd(const Model& model, const ParamSet& params, const Batch& batch, double h = 1e-5) {
  const Vector theta = params.flatten();
  const std::size_t m = theta.size();
  if (m > kSolveLimit) throw OracleScaleError("loss_hessian_fd: too many parameters");
  Matrix hess(m, m);
  ParamSet probe = params;
  for (std::size_t j = 0; j < m; ++j) {
    Vector t = theta;
    t[j] = theta[j] + h;
    probe.assign(t);
    const Vector gp = grad_params(model, probe, batch).flatten();
    t[j] = theta[j] - h;
    probe.assign(t);
    const Vector gm = grad_params(model, probe, batch).flatten();
    for (std::size_t i = 0; i < m; ++i) hess(i, j) = (gp[i] - gm[i]) / (2.0 * h);
  }
  return symmetrize(hess);
}

// ---------------------------------------------------------------------------
// Exact proximal point step

struct PpmProblem {
  const Model& model;
  const ParamSet& theta;
  const Batch& batch;      // the loss term
  const Batch& fsd_batch;  // inputs over which the function-space term is averaged
  double lambda_fsd = 0.0;
  double lambda_wsd = 0.0;
  FsdKind kind = FsdKind::kl_gaussian;
};

enum class PpmMethod { gradient_descent, lbfgs };

struct PpmSolveOptions {
  double tol = 1e-10;
  std::size_t max_iter = 100000;
  PpmMethod method = PpmMethod::gradient_descent;
  std::size_t memory = 10;  // L-BFGS pairs
};

struct PpmResult {
  ParamSet u;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
};

namespace detail {

struct PpmEval {
  double value;
  Vector grad;
};

inline PpmEval ppm_eval(const PpmProblem& p, const Matrix& fsd_reference, const ParamSet& u) {
  auto [out, trace] = forward(p.model, u, p.batch.inputs);
  double value = loss_eval(p.model.head, out, p.batch);
  ParamSet grad = backward(p.model, u, trace, loss_output_grad(p.model.head, out, p.batch));
  if (p.lambda_fsd > 0.0) {
    auto [fo, ft] = forward(p.model, u, p.fsd_batch.inputs);
    const FsdValue f = fsd_outputs(p.kind, fo, fsd_reference);
    value += p.lambda_fsd * f.value;
    grad.axpy(p.lambda_fsd, backward(p.model, u, ft, f.d_out));
  }
  if (p.lambda_wsd > 0.0) {
    value += p.lambda_wsd * wsd(u, p.theta);
    grad.axpy(p.lambda_wsd, u);
    grad.axpy(-p.lambda_wsd, p.theta);
  }
  return {value, grad.flatten()};
}

}  // namespace detail

/// argmin_u J_B(u) + lambda_fsd * FSD(u, theta) + lambda_wsd * WSD(u, theta),
/// started from theta with a monotone Armijo backtracking search. Plain
/// gradient descent uses Barzilai-Borwein trial steps; the L-BFGS variant
/// rescales the gradient with a limited-memory inverse-curvature estimate and
/// falls back to the gradient whenever that is not a descent direction.
inline PpmResult exact_ppm_solve(const PpmProblem& p, const PpmSolveOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw ContractError("exact_ppm_solve: tol must be positive");
  if (p.model.num_params() > 500) throw OracleScaleError("exact_ppm_solve: model above 500 parameters");
  const Matrix reference = p.lambda_fsd > 0.0 ? predict(p.model, p.theta, p.fsd_batch.inputs) : Matrix();

  ParamSet u = p.theta;
  Vector x = u.flatten();
  const std::size_t n = x.size();
  detail::PpmEval cur = detail::ppm_eval(p, reference, u);
  double bb_step = 1.0;
  std::vector<Vector> s_hist, y_hist;
  ParamSet trial = u;
  Vector dir(n), x_new(n);
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    const double gn = norm2(cur.grad);
    if (gn <= opt.tol) return {u, cur.value, gn, it};

    double step = 1.0;
    if (opt.method == PpmMethod::lbfgs && !s_hist.empty()) {
      // Two-loop recursion.
      Vector q = cur.grad;
      std::vector<double> alpha(s_hist.size());
      for (std::size_t k = s_hist.size(); k-- > 0;) {
        alpha[k] = dot(s_hist[k], q) / dot(y_hist[k], s_hist[k]);
        for (std::size_t i = 0; i < n; ++i) q[i] -= alpha[k] * y_hist[k][i];
      }
      const double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
      for (auto& v : q) v *= gamma;
      for (std::size_t k = 0; k < s_hist.size(); ++k) {
        const double beta = dot(y_hist[k], q) / dot(y_hist[k], s_hist[k]);
        for (std::size_t i = 0; i < n; ++i) q[i] += (alpha[k] - beta) * s_hist[k][i];
      }
      dir = q;
      if (!(dot(dir, cur.grad) > 0.0) || !all_finite(dir)) {
        dir = cur.grad;
        step = bb_step;
      }
    } else {
      dir = cur.grad;
      step = bb_step;
    }
    const double slope = dot(dir, cur.grad);

    // The slack admits steps whose decrease is below the objective's precision.
    const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::abs(cur.value);
    detail::PpmEval next{};
    for (int bt = 0;; ++bt) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] - step * dir[i];
      trial.assign(x_new);
      bool ok = trial.finite();
      if (ok) {
        try {
          next = detail::ppm_eval(p, reference, trial);
          ok = std::isfinite(next.value) && next.value <= cur.value - 1e-4 * step * slope + slack;
        } catch (const NumericalError&) {
          ok = false;
        }
      }
      if (ok) break;
      step *= 0.5;
      if (bt > 200) throw ConvergenceError("exact_ppm_solve: line search failed", gn);
    }

    Vector s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - x[i];
      y[i] = next.grad[i] - cur.grad[i];
    }
    const double sy = dot(s, y);
    bb_step = sy > 0.0 ? dot(s, s) / sy : std::min(2.0 * bb_step, 1e6);
    if (opt.method == PpmMethod::lbfgs && sy > 1e-12 * norm2(s) * norm2(y)) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      if (s_hist.size() > opt.memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
      }
    }
    x = x_new;
    u = trial;
    cur = std::move(next);
  }
  throw ConvergenceError("exact_ppm_solve: iteration cap reached", norm2(cur.grad));
}

// ---------------------------------------------------------------------------
// KFAC

/// Per-layer Kronecker factors: a = E[abar abar^T] over layer inputs (with a
/// trailing 1 when the layer has a bias) and b = E[Ds Ds^T] over pre-activation
/// gradients.
struct KfacFactors {
  Matrix a;
  Matrix b;
};

namespace detail {

// Backpropagated d/ds_l of <d_out, f> for every layer, one row per example.
inline std::vector<Matrix> layer_deltas(const Model& model, const ParamSet& params, const ForwardTrace& trace,
                                        const Matrix& d_out) {
  std::vector<Matrix> deltas(model.layers.size());
  Matrix delta = d_out;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const Activation act = model.layers[l].activation;
    if (act != Activation::linear) {
      for (std::size_t k = 0; k < delta.size(); ++k)
        delta.data()[k] *= activate_deriv(act, trace.pre[l].data()[k], trace.post[l + 1].data()[k]);
    }
    deltas[l] = delta;
    if (l > 0) delta = matmul_nt(delta, params.layers[l].weight);
  }
  return deltas;
}

inline Matrix homogeneous(const Matrix& a, bool bias) {
  if (!bias) return a;
  Matrix h(a.rows(), a.cols() + 1, 1.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) h(i, j) = a(i, j);
  return h;
}

}  // namespace detail

/// Output-gradient samples from the model's predictive distribution: a
/// unit-variance Gaussian around the outputs (dy = eps) or a categorical draw
/// for softmax heads (dy = p - e_y).
inline Matrix sample_output_grads(Head head, const Matrix& outputs, Rng& rng) {
  if (head == Head::rosenbrock) throw ContractError("kfac: the Rosenbrock model has no layer statistics");
  Matrix d(outputs.rows(), outputs.cols());
  if (head == Head::classification) {
    const Matrix p = softmax_rows(outputs);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double u = rng.uniform();
      std::size_t y = 0;
      while (y + 1 < p.cols() && u >= p(i, y)) u -= p(i, y++);
      for (std::size_t k = 0; k < p.cols(); ++k) d(i, k) = p(i, k) - (k == y ? 1.0 : 0.0);
    }
  } else {
    for (auto& x : d.data()) x = rng.normal();
  }
  return d;
}

/// Factors from a forward trace and per-example output-gradient samples.
inline std::vector<KfacFactors> kfac_blocks(const Model& model, const ParamSet& params, const ForwardTrace& trace,
                                            const Matrix& output_grads) {
  const std::size_t n = output_grads.rows();
  if (n == 0) throw ContractError("kfac_blocks: empty dataset");
  const std::vector<Matrix> deltas = detail::layer_deltas(model, params, trace, output_grads);
  std::vector<KfacFactors> f;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Matrix a = detail::homogeneous(trace.post[l], model.layers[l].has_bias);
    f.push_back({symmetrize(matmul_tn(a, a) * inv_n), symmetrize(matmul_tn(deltas[l], deltas[l]) * inv_n)});
  }
  return f;
}

inline std::vector<KfacFactors> kfac_blocks(const Model& model, const ParamSet& params, const Matrix& inputs,
                                            Rng& rng) {
  if (inputs.rows() == 0) throw ContractError("kfac_blocks: empty dataset");
  auto [out, trace] = forward(model, params, inputs);
  return kfac_blocks(model, params, trace, sample_output_grads(model.head, out, rng));
}

inline Matrix damped(const Matrix& m, double gamma) {
  Matrix d = m;
  for (std::size_t i = 0; i < d.rows(); ++i) d(i, i) += gamma;
  return d;
}

/// Per layer, [W; b^T] <- [W; b^T] - eta (A + gamma I)^{-1} [dW; db^T] (B + gamma I)^{-1}.
inline ParamSet kfac_update(const ParamSet& theta, const ParamSet& grad, const std::vector<KfacFactors>& blocks,
                            double gamma, double eta) {
  if (!(gamma >= 0.0)) throw ContractError("kfac_update: damping must be >= 0");
  if (blocks.size() != theta.layers.size()) throw DimensionError("kfac_update: one factor pair per layer");
  ParamSet out = theta;
  for (std::size_t l = 0; l < theta.layers.size(); ++l) {
    const Matrix& gw = grad.layers[l].weight;
    const Vector& gb = grad.layers[l].bias;
    Matrix gh(gw.rows() + (gb.empty() ? 0 : 1), gw.cols());
    for (std::size_t i = 0; i < gw.rows(); ++i)
      for (std::size_t j = 0; j < gw.cols(); ++j) gh(i, j) = gw(i, j);
    for (std::size_t j = 0; j < gb.size(); ++j) gh(gw.rows(), j) = gb[j];
    if (blocks[l].a.rows() != gh.rows() || blocks[l].b.rows() != gh.cols()) {
      throw DimensionError("kfac_update: factor shapes do not match layer " + std::to_string(l));
    }
    const Matrix left = cholesky_solve(cholesky(damped(blocks[l].a, gamma)), gh);
    const Matrix step = transpose(cholesky_solve(cholesky(damped(blocks[l].b, gamma)), transpose(left)));
    for (std::size_t i = 0; i < gw.rows(); ++i)
      for (std::size_t j = 0; j < gw.cols(); ++j) out.layers[l].weight(i, j) -= eta * step(i, j);
    for (std::size_t j = 0; j < gb.size(); ++j) out.layers[l].bias[j] -= eta * step(gw.rows(), j);
  }
  if (!out.finite()) throw NumericalError("kfac_update: non-finite parameters");
  return out;
}

struct KfacConfig {
  double lr = 0.01;
  double damping = 1e-3;
  double ema = 0.95;  // decay of the running factor estimates, which start at identity
  double divergence_threshold = 1e12;
};

/// KFAC training with factors re-estimated on every minibatch.
inline TrainLog kfac_train(const Model& model, const ParamSet& theta0, const KfacConfig& cfg, const DataSource& data,
                           std::size_t steps, Rng& rng, const RowSink& sink = {}) {
  if (steps < 1) throw ContractError("kfac_train: steps must be >= 1");
  if (!(cfg.lr > 0.0) || !(cfg.damping > 0.0) || !(cfg.ema >= 0.0 && cfg.ema < 1.0)) {
    throw ContractError("kfac_train: needs lr > 0, damping > 0, ema in [0, 1)");
  }
  TrainLog log;
  log.rows.reserve(steps);
  ParamSet theta = theta0;
  std::vector<KfacFactors> running;
  for (const auto& l : model.layers) {
    running.push_back({Matrix::identity(l.fan_in + (l.has_bias ? 1 : 0)), Matrix::identity(l.fan_out)});
  }
  for (std::size_t t = 0; t < steps; ++t) {
    const Batch batch = data.sample(rng);
    TrainRow row;
    row.step = t;
    try {
      auto [out, trace] = forward(model, theta, batch.inputs);
      const double loss = loss_eval(model.head, out, batch);
      detail::guard_divergence(loss, cfg.divergence_threshold, t);
      row.train_loss = data.objective ? data.objective(theta) : loss;
      detail::guard_divergence(row.train_loss, cfg.divergence_threshold, t);
      if (data.held_out) row.eval_loss = data.held_out(theta);
      const ParamSet grad = backward(model, theta, trace, loss_output_grad(model.head, out, batch));
      const auto fresh = kfac_blocks(model, theta, trace, sample_output_grads(model.head, out, rng));
      for (std::size_t l = 0; l < running.size(); ++l) {
        running[l].a *= cfg.ema;
        running[l].a.axpy(1.0 - cfg.ema, fresh[l].a);
        running[l].b *= cfg.ema;
        running[l].b.axpy(1.0 - cfg.ema, fresh[l].b);
      }
      theta = kfac_update(theta, grad, running, cfg.damping, cfg.lr);
    } catch (const NumericalError& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(t) + ": " + e.what(), t);
    }
    row.lr_or_phi_norm = cfg.lr;
    if (sink) sink(row);
    log.rows.push_back(row);
  }
  log.final_params = std::move(theta);
  return log;
}

// ---------------------------------------------------------------------------
// KFAC as the optimum of the quadratic meta-objective

/// A single bias-free linear layer y = x W whose function-space discrepancy is
/// the Gaussian KL 0.5 (y' - y)^T Lambda (y' - y). Its FSD Hessian factorizes
/// exactly as E[x x^T] (x) Lambda, and Lambda is also the exact expectation of
/// Ds Ds^T for Ds ~ N(0, Lambda).
struct KfacInstance {
  Matrix inputs;     // n x fan_in
  Matrix precision;  // Lambda, fan_out x fan_out
};

inline KfacInstance random_kfac_instance(Rng& rng, std::size_t fan_in, std::size_t fan_out, std::size_t n) {
  KfacInstance inst{random_normal(rng, n, fan_in), {}};
  const Matrix r = random_normal(rng, fan_out, fan_out);
  inst.precision = damped(matmul_tn(r, r) * (1.0 / static_cast<double>(fan_out)), 0.5);
  return inst;
}

/// Permutation from ParamSet::flatten order (row-major W) to column stacking.
inline Matrix to_column_stacking(const Matrix& dense, std::size_t rows, std::size_t cols) {
  Matrix out(dense.rows(), dense.cols());
  auto cm = [&](std::size_t rm) { return (rm % cols) * rows + rm / cols; };
  for (std::size_t i = 0; i < dense.rows(); ++i)
    for (std::size_t j = 0; j < dense.cols(); ++j) out(cm(i), cm(j)) = dense(i, j);
  return out;
}

inline Report verify_kfac_recovery(const KfacInstance& inst) {
  const std::size_t fan_in = inst.inputs.cols(), fan_out = inst.precision.rows();
  if (fan_in * fan_out > 16) throw OracleScaleError("verify_kfac_recovery: instance above 16 parameters");
  if (inst.inputs.rows() == 0) throw ContractError("verify_kfac_recovery: empty instance");
  if (!is_symmetric(inst.precision) || sym_eig_min(inst.precision) <= 0.0) {
    throw ContractError("verify_kfac_recovery: precision must be symmetric positive definite");
  }
  const Model model{{LayerSpec{fan_in, fan_out, Activation::linear, false}}, Head::regression};
  ParamSet theta = zero_params(model);

  // Dense Fisher of the FSD from per-example Jacobians.
  const std::vector<Matrix> jac = per_example_jacobian(model, theta, inst.inputs);
  const std::size_t m = fan_in * fan_out;
  Matrix g(m, m);
  for (const auto& j : jac) g += matmul_tn(j, matmul(inst.precision, j));
  g *= 1.0 / static_cast<double>(jac.size());
  const Matrix p_star = to_column_stacking(optimal_dense_precond(symmetrize(g), 1.0, 0.0), fan_in, fan_out);

  // Exact KFAC statistics: E[a a^T] from the inputs, E[Ds Ds^T] = Lambda.
  const Matrix a_kfac = symmetrize(matmul_tn(inst.inputs, inst.inputs) * (1.0 / static_cast<double>(inst.inputs.rows())));
  const Matrix& b_kfac = inst.precision;
  const Matrix kfac_inv = kron_dense(inverse_spd(b_kfac), inverse_spd(a_kfac));

  Report r;
  const double rel = max_rel_diff(p_star, kfac_inv);
  r.add("kfac_recovery_dense", rel, 1e-6, rel <= 1e-6, "optimal dense preconditioner vs inverse KFAC factors");

  // With S = 1 the block family gives A A^T (x) B B^T.
  auto inv_sqrt = [](const Matrix& x) { return sym_apply(x, [](double v) { return 1.0 / std::sqrt(v); }); };
  const KronBlocks blocks{inv_sqrt(b_kfac), inv_sqrt(a_kfac), Matrix(fan_in, fan_out, 1.0)};
  const double rel_blocks = max_rel_diff(dense_precond(blocks), p_star);
  r.add("kfac_recovery_blocks", rel_blocks, 1e-6, rel_blocks <= 1e-6, "Kronecker block family reproduces it");
  return r;
}

}  // namespace apo

#endif  // APO_ORACLES_HPP
