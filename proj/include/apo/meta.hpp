#ifndef APO_META_HPP
#define APO_META_HPP

// Proximal meta-objective and the online meta-learning loop.
//
// For the current parameters theta, a minibatch B with gradient g, and
// meta-parameters phi, one base step gives theta'(phi). The meta-objective is
//
//   Q(phi) = J(theta'(phi)) + lambda_fsd * mean_x rho(f(x, theta'), f(x, theta))
//                           + lambda_wsd * 0.5 * |theta' - theta|^2
//
// with g and the base optimizer state held fixed. Its gradient comes from a
// single backward pass to theta' followed by the chain rule through the update
// rule (a scalar for the learning rate, a small VJP for Kronecker blocks).

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "apo/baseopt.hpp"
#include "apo/diffnet.hpp"
#include "apo/kronprecond.hpp"
#include "apo/numkit.hpp"

namespace apo {

enum class FsdKind {
  kl_categorical,  // KL(p_theta || p_theta') between softmax outputs
  kl_gaussian,     // unit-variance Gaussian KL, 0.5 |y' - y|^2
  squared_distance // |y' - y|^2
};

enum class BatchPolicy { same, fresh };

inline std::string to_string(FsdKind k) {
  switch (k) {
    case FsdKind::kl_categorical: return "kl-categorical";
    case FsdKind::kl_gaussian: return "kl-gaussian";
    case FsdKind::squared_distance: return "squared-distance";
  }
  return "?";
}

inline std::string to_string(BatchPolicy p) { return p == BatchPolicy::same ? "same" : "fresh"; }

struct ProximalConfig {
  double lambda_fsd = 0.0;
  double lambda_wsd = 0.0;
  FsdKind fsd_kind = FsdKind::kl_gaussian;
  std::size_t interval = 10;  // K: one meta-update every K base steps
  double meta_lr = 0.1;
  BaseOptKind meta_opt = BaseOptKind::rmsprop();
  std::size_t warmup_steps = 0;
  BatchPolicy loss_batch_policy = BatchPolicy::same;
  BatchPolicy fsd_batch_policy = BatchPolicy::fresh;
  double scale = 0.9;

  /// RMSprop(0.1) on log eta.
  static ProximalConfig for_lr() { return {}; }

  /// Adam(1e-4) on the blocks, 300 warm-up steps.
  static ProximalConfig for_precond() {
    ProximalConfig c;
    c.meta_lr = 1e-4;
    c.meta_opt = BaseOptKind::adam();
    c.warmup_steps = 300;
    return c;
  }

  void validate() const {
    if (!(lambda_fsd >= 0.0) || !(lambda_wsd >= 0.0)) throw ContractError("lambda_fsd and lambda_wsd must be >= 0");
    if (interval < 1) throw ContractError("meta interval K must be >= 1");
    if (!(meta_lr > 0.0)) throw ContractError("meta_lr must be positive");
    if (!(scale > 0.0)) throw ContractError("preconditioner scale must be positive");
    meta_opt.validate();
  }

  friend bool operator==(const ProximalConfig&, const ProximalConfig&) = default;
};

/// Flips the loss batch policy (and optionally the FSD one). Applying it twice
/// with the same flags returns the original config.
inline ProximalConfig ablation_variants(ProximalConfig cfg, bool toggle_loss = true, bool toggle_fsd = false) {
  auto flip = [](BatchPolicy p) { return p == BatchPolicy::same ? BatchPolicy::fresh : BatchPolicy::same; };
  if (toggle_loss) cfg.loss_batch_policy = flip(cfg.loss_batch_policy);
  if (toggle_fsd) cfg.fsd_batch_policy = flip(cfg.fsd_batch_policy);
  return cfg;
}

struct LrPhi {
  double log_lr = 0.0;
  double lr() const { return std::exp(log_lr); }
  friend bool operator==(const LrPhi&, const LrPhi&) = default;
};

using MetaParams = std::variant<LrPhi, PrecondPhi>;

inline bool is_lr(const MetaParams& phi) { return std::holds_alternative<LrPhi>(phi); }

inline Vector flatten(const MetaParams& phi) {
  if (const auto* p = std::get_if<LrPhi>(&phi)) return {p->log_lr};
  return std::get<PrecondPhi>(phi).flatten();
}

inline void assign(MetaParams& phi, std::span<const double> flat) {
  if (auto* p = std::get_if<LrPhi>(&phi)) {
    if (flat.size() != 1) throw DimensionError("assign: LrPhi takes one value");
    p->log_lr = flat[0];
    return;
  }
  std::get<PrecondPhi>(phi).assign(flat);
}

/// lr for LrPhi, Frobenius norm of the flattened blocks otherwise.
inline double phi_summary(const MetaParams& phi) {
  if (const auto* p = std::get_if<LrPhi>(&phi)) return p->lr();
  return std::get<PrecondPhi>(phi).frobenius_norm();
}

struct MetaState {
  OptState opt;
  std::size_t iterations = 0;
  friend bool operator==(const MetaState&, const MetaState&) = default;
};

// ---------------------------------------------------------------------------
// Discrepancies

/// 0.5 * sum (theta' - theta)^2 over weights and biases.
inline double wsd(const ParamSet& updated, const ParamSet& current) {
  const Vector a = updated.flatten(), b = current.flatten();
  if (a.size() != b.size()) throw DimensionError("wsd: parameter sets differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return 0.5 * s;
}

struct FsdValue {
  double value = 0.0;
  Matrix d_out;  // d value / d outputs of the updated model
};

/// Mean over rows of rho(updated_row, current_row), with its gradient.
inline FsdValue fsd_outputs(FsdKind kind, const Matrix& updated, const Matrix& current) {
  updated.require_same_shape(current, "fsd");
  if (updated.rows() == 0) throw ContractError("fsd: empty batch");
  const double inv_b = 1.0 / static_cast<double>(updated.rows());
  FsdValue r{0.0, Matrix(updated.rows(), updated.cols())};
  switch (kind) {
    case FsdKind::kl_categorical:
      for (std::size_t i = 0; i < updated.rows(); ++i) {
        const Vector lq = log_softmax_row(updated.row(i));
        const Vector lp = log_softmax_row(current.row(i));
        for (std::size_t k = 0; k < lp.size(); ++k) {
          const double p = std::exp(lp[k]);
          r.value += p * (lp[k] - lq[k]);
          r.d_out(i, k) = (std::exp(lq[k]) - p) * inv_b;
        }
      }
      break;
    case FsdKind::kl_gaussian:
    case FsdKind::squared_distance: {
      const double w = kind == FsdKind::kl_gaussian ? 0.5 : 1.0;
      for (std::size_t k = 0; k < updated.size(); ++k) {
        const double d = updated.data()[k] - current.data()[k];
        r.value += w * d * d;
        r.d_out.data()[k] = 2.0 * w * d * inv_b;
      }
      break;
    }
  }
  r.value *= inv_b;
  return r;
}

inline double fsd(const Model& model, const ParamSet& updated, const ParamSet& current, const Batch& batch,
                  FsdKind kind) {
  return fsd_outputs(kind, predict(model, updated, batch.inputs), predict(model, current, batch.inputs)).value;
}

// ---------------------------------------------------------------------------
// Meta-objective

/// Everything Q depends on besides phi. Holds references: the referenced
/// objects must outlive it.
struct MetaProblem {
  const Model& model;
  const ParamSet& theta;
  const Batch& batch;        // B: the batch the gradient was taken on
  const Batch& batch_prime;  // B': independently sampled
  const ProximalConfig& cfg;
  ParamSet grad;             // g = grad J_B(theta)
  ParamSet direction;        // base optimizer direction from g and the pre-step state

  const Batch& loss_batch() const { return cfg.loss_batch_policy == BatchPolicy::same ? batch : batch_prime; }
  const Batch& fsd_batch() const { return cfg.fsd_batch_policy == BatchPolicy::fresh ? batch_prime : batch; }
};

inline MetaProblem make_meta_problem(const Model& model, const ParamSet& theta, const BaseOptKind& base,
                                     const OptState& opt_state, const Batch& batch, const Batch& batch_prime,
                                     const ProximalConfig& cfg) {
  if (batch.size() == 0 || batch_prime.size() == 0) throw ContractError("meta_objective: empty batch");
  MetaProblem p{model, theta, batch, batch_prime, cfg, grad_params(model, theta, batch), {}};
  p.direction = p.grad;
  p.direction.assign(update_direction(base, opt_state, p.grad.flatten()).direction);
  return p;
}

inline ParamSet meta_update(const MetaProblem& p, const MetaParams& phi) {
  if (const auto* lr = std::get_if<LrPhi>(&phi)) return apply_lr_update(p.theta, lr->lr(), p.direction);
  return apply_precond_update(p.theta, std::get<PrecondPhi>(phi), p.grad);
}

struct MetaTerms {
  double total = 0.0;
  double loss = 0.0;
  double fsd = 0.0;  // unweighted
  double wsd = 0.0;  // unweighted
};

namespace detail {

inline void require_finite_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericalError(std::string("meta_objective: non-finite ") + name + " term");
}

// Q and d Q / d theta' at the updated parameters.
struct MetaEval {
  MetaTerms terms;
  ParamSet d_updated;
};

inline MetaEval meta_eval(const MetaProblem& p, const ParamSet& updated, bool need_grad) {
  const ProximalConfig& cfg = p.cfg;
  MetaEval e;
  auto [out, trace] = forward(p.model, updated, p.loss_batch().inputs);
  e.terms.loss = loss_eval(p.model.head, out, p.loss_batch());
  detail::require_finite_term(e.terms.loss, "loss");
  if (need_grad) e.d_updated = backward(p.model, updated, trace, loss_output_grad(p.model.head, out, p.loss_batch()));

  if (cfg.lambda_fsd > 0.0) {
    const Batch& fb = p.fsd_batch();
    auto [out_new, trace_new] = forward(p.model, updated, fb.inputs);
    const FsdValue f = fsd_outputs(cfg.fsd_kind, out_new, predict(p.model, p.theta, fb.inputs));
    e.terms.fsd = f.value;
    detail::require_finite_term(e.terms.fsd, "fsd");
    if (need_grad) e.d_updated.axpy(cfg.lambda_fsd, backward(p.model, updated, trace_new, f.d_out));
  }
  if (cfg.lambda_wsd > 0.0) {
    e.terms.wsd = wsd(updated, p.theta);
    detail::require_finite_term(e.terms.wsd, "wsd");
    if (need_grad) {
      e.d_updated.axpy(cfg.lambda_wsd, updated);
      e.d_updated.axpy(-cfg.lambda_wsd, p.theta);
    }
  }
  e.terms.total = e.terms.loss + cfg.lambda_fsd * e.terms.fsd + cfg.lambda_wsd * e.terms.wsd;
  detail::require_finite_term(e.terms.total, "total");
  return e;
}

}  // namespace detail

inline MetaTerms meta_objective(const MetaProblem& p, const MetaParams& phi) {
  return detail::meta_eval(p, meta_update(p, phi), false).terms;
}

inline MetaTerms meta_objective(const Model& model, const ParamSet& theta, const MetaParams& phi,
                                const BaseOptKind& base, const OptState& opt_state, const Batch& batch,
                                const Batch& batch_prime, const ProximalConfig& cfg) {
  return meta_objective(make_meta_problem(model, theta, base, opt_state, batch, batch_prime, cfg), phi);
}

struct MetaGradient {
  MetaTerms terms;
  MetaParams grad;  // same alternative and shape as phi
};

inline MetaGradient meta_gradient(const MetaProblem& p, const MetaParams& phi) {
  const ParamSet updated = meta_update(p, phi);
  const detail::MetaEval e = detail::meta_eval(p, updated, true);
  MetaGradient r{e.terms, phi};

  if (const auto* lr = std::get_if<LrPhi>(&phi)) {
    // theta' = theta - exp(s) * delta  =>  dQ/ds = -exp(s) <dQ/dtheta', delta>
    const double dq = -lr->lr() * dot(e.d_updated.flatten(), p.direction.flatten());
    if (!std::isfinite(dq)) throw NumericalError("meta_gradient: non-finite value");
    r.grad = LrPhi{dq};
    return r;
  }

  const auto& pp = std::get<PrecondPhi>(phi);
  auto& gp = std::get<PrecondPhi>(r.grad);
  const double c = pp.scale;
  for (std::size_t l = 0; l < pp.blocks.size(); ++l) {
    // theta'_W = W - c M with M = B (S^2 o B^T G A) A^T, so dQ/dM = -c dQ/dW'.
    const Matrix upstream = -c * e.d_updated.layers[l].weight;
    gp.blocks[l] = apply_precond_vjp(pp.blocks[l], p.grad.layers[l].weight, upstream);
    const Vector& d = pp.bias_diag[l];
    for (std::size_t j = 0; j < d.size(); ++j) {
      gp.bias_diag[l][j] = -c * e.d_updated.layers[l].bias[j] * 2.0 * d[j] * p.grad.layers[l].bias[j];
    }
  }
  if (!all_finite(gp.flatten())) throw NumericalError("meta_gradient: non-finite value");
  return r;
}

inline MetaGradient meta_gradient(const Model& model, const ParamSet& theta, const MetaParams& phi,
                                  const BaseOptKind& base, const OptState& opt_state, const Batch& batch,
                                  const Batch& batch_prime, const ProximalConfig& cfg) {
  return meta_gradient(make_meta_problem(model, theta, base, opt_state, batch, batch_prime, cfg), phi);
}

/// phi <- phi - meta_lr * direction, in phi's native parameterization.
inline std::pair<MetaParams, MetaState> meta_step(const MetaParams& phi, const MetaState& state,
                                                  const MetaParams& grad, const ProximalConfig& cfg) {
  if (phi.index() != grad.index()) throw DimensionError("meta_step: gradient kind differs from phi");
  const Vector g = flatten(grad);
  const DirectionResult d = update_direction(cfg.meta_opt, state.opt, g);
  MetaParams next = phi;
  assign(next, apply_lr_update(flatten(phi), cfg.meta_lr, d.direction));
  return {std::move(next), MetaState{d.state, state.iterations + 1}};
}

// ---------------------------------------------------------------------------
// Training loop

enum class AdaptMode { none, apo_lr, apo_precond, kfac };

inline std::string to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::none: return "none";
    case AdaptMode::apo_lr: return "apo-lr";
    case AdaptMode::apo_precond: return "apo-precond";
    case AdaptMode::kfac: return "kfac";
  }
  return "?";
}

/// Where minibatches come from. `objective` and `held_out` are optional
/// deterministic evaluators (full training set or population loss, and a
/// held-out loss); when `objective` is absent the minibatch loss is logged.
struct DataSource {
  std::function<Batch(Rng&)> sample;
  std::function<double(const ParamSet&)> objective;
  std::function<double(const ParamSet&)> held_out;
};

struct TrainConfig {
  AdaptMode mode = AdaptMode::none;
  BaseOptKind base_opt = BaseOptKind::sgd();
  double lr = 0.01;  // fixed rate, initial rate for apo-lr, warm-up rate for apo-precond
  ProximalConfig prox = ProximalConfig::for_lr();
  double divergence_threshold = 1e12;
};

/// One row per base step, losses measured at the parameters before the step.
struct TrainRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> meta_objective;  // set on steps with a meta-update
  double lr_or_phi_norm = 0.0;
  double fsd_term = 0.0;
  double wsd_term = 0.0;
};

/// Called with every row as soon as it is complete.
using RowSink = std::function<void(const TrainRow&)>;

struct TrainLog {
  std::vector<TrainRow> rows;
  ParamSet final_params;
  MetaParams final_phi = LrPhi{};
};

namespace detail {

inline void guard_divergence(double loss, double threshold, std::size_t step) {
  if (!std::isfinite(loss) || loss > threshold) {
    throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")",
                          step);
  }
}

}  // namespace detail

/// Plain training with a fixed learning rate, or online meta-learning of the
/// learning rate / Kronecker preconditioner. Each iteration samples B; every
/// K-th iteration also samples B' and takes one meta-step; then theta moves
/// with the current phi. During preconditioner warm-up theta follows the base
/// optimizer (normally SGD with momentum) while phi keeps learning.
inline TrainLog apo_train(const Model& model, const ParamSet& theta0, const TrainConfig& cfg,
                          const DataSource& data, std::size_t steps, Rng& rng, const RowSink& sink = {}) {
  if (steps < 1) throw ContractError("apo_train: steps must be >= 1");
  if (cfg.mode == AdaptMode::kfac) throw ContractError("apo_train: kfac training lives in the oracles module");
  if (!(cfg.lr > 0.0)) throw ContractError("apo_train: lr must be positive");
  cfg.base_opt.validate();
  cfg.prox.validate();
  check_conformant(model, theta0);

  TrainLog log;
  log.rows.reserve(steps);
  ParamSet theta = theta0;
  OptState opt;
  MetaState meta;
  MetaParams phi = LrPhi{std::log(cfg.lr)};
  if (cfg.mode == AdaptMode::apo_precond) phi = init_identity(model, cfg.prox.scale);
  const bool adaptive = cfg.mode != AdaptMode::none;
  // exp(log(lr)) need not round-trip, so the configured rate is used verbatim
  // until the first meta-step changes it.
  double lr = cfg.lr;

  for (std::size_t t = 0; t < steps; ++t) {
    const Batch batch = data.sample(rng);
    TrainRow row;
    row.step = t;
    try {
      const LossAndGrad lg = loss_and_grad(model, theta, batch);
      detail::guard_divergence(lg.loss, cfg.divergence_threshold, t);
      row.train_loss = data.objective ? data.objective(theta) : lg.loss;
      detail::guard_divergence(row.train_loss, cfg.divergence_threshold, t);
      if (data.held_out) row.eval_loss = data.held_out(theta);

      if (adaptive && (t + 1) % cfg.prox.interval == 0) {
        const Batch batch_prime = data.sample(rng);
        MetaProblem prob{model, theta, batch, batch_prime, cfg.prox, lg.grad, lg.grad};
        if (cfg.mode == AdaptMode::apo_lr) {
          prob.direction.assign(update_direction(cfg.base_opt, opt, lg.grad.flatten()).direction);
        }
        const MetaGradient mg = meta_gradient(prob, phi);
        row.meta_objective = mg.terms.total;
        row.fsd_term = mg.terms.fsd;
        row.wsd_term = mg.terms.wsd;
        std::tie(phi, meta) = meta_step(phi, meta, mg.grad, cfg.prox);
        if (cfg.mode == AdaptMode::apo_lr) lr = std::get<LrPhi>(phi).lr();
      }

      const bool warming = cfg.mode == AdaptMode::apo_precond && t < cfg.prox.warmup_steps;
      if (cfg.mode == AdaptMode::apo_precond && !warming) {
        theta = apply_precond_update(theta, std::get<PrecondPhi>(phi), lg.grad);
      } else {
        DirectionResult d = update_direction(cfg.base_opt, opt, lg.grad.flatten());
        opt = std::move(d.state);
        ParamSet dir = lg.grad;
        dir.assign(d.direction);
        theta = apply_lr_update(theta, lr, dir);
      }
      if (!theta.finite()) throw NumericalError("non-finite parameters");
    } catch (const NumericalError& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(t) + ": " + e.what(), t);
    }
    row.lr_or_phi_norm = cfg.mode == AdaptMode::apo_precond ? phi_summary(phi) : lr;
    if (!(lr > 0.0)) {
      throw DivergenceError("learning rate left the positive range at step " + std::to_string(t), t);
    }
    if (sink) sink(row);
    log.rows.push_back(row);
  }
  log.final_params = std::move(theta);
  log.final_phi = std::move(phi);
  return log;
}

}  // namespace apo

#endif  // APO_META_HPP
