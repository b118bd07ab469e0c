#ifndef APO_BASEOPT_HPP
#define APO_BASEOPT_HPP

// Base optimizer directions. A step is theta' = theta - lr * direction, where
// the direction comes from update_direction and the accumulators are plain
// data the meta-gradient treats as constants.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "apo/diffnet.hpp"
#include "apo/numkit.hpp"

namespace apo {

struct BaseOptKind {
  enum class Type { sgd, momentum, rmsprop, adam };

  Type type = Type::sgd;
  double beta1 = 0.9;    // momentum coefficient (momentum, adam)
  double beta2 = 0.999;  // second-moment decay (rmsprop, adam)
  double eps = 1e-8;

  static BaseOptKind sgd() { return {Type::sgd, 0.0, 0.0, 0.0}; }
  static BaseOptKind momentum(double beta = 0.9) { return {Type::momentum, beta, 0.0, 0.0}; }
  static BaseOptKind rmsprop(double beta2 = 0.99, double eps = 1e-8) {
    return {Type::rmsprop, 0.0, beta2, eps};
  }
  static BaseOptKind adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    return {Type::adam, beta1, beta2, eps};
  }

  void validate() const {
    auto in_unit = [](double b) { return b >= 0.0 && b < 1.0; };
    if (!in_unit(beta1) || !in_unit(beta2)) throw ContractError("optimizer betas must lie in [0, 1)");
    if ((type == Type::rmsprop || type == Type::adam) && !(eps > 0.0)) {
      throw ContractError("optimizer eps must be positive");
    }
  }

  friend bool operator==(const BaseOptKind&, const BaseOptKind&) = default;
};

inline std::string to_string(BaseOptKind::Type t) {
  switch (t) {
    case BaseOptKind::Type::sgd: return "sgd";
    case BaseOptKind::Type::momentum: return "momentum";
    case BaseOptKind::Type::rmsprop: return "rmsprop";
    case BaseOptKind::Type::adam: return "adam";
  }
  return "?";
}

/// Accumulators over a flat parameter vector. Empty buffers mean "fresh".
struct OptState {
  Vector m;
  Vector v;
  std::size_t step = 0;

  friend bool operator==(const OptState&, const OptState&) = default;
};

struct DirectionResult {
  Vector direction;
  OptState state;
};

inline DirectionResult update_direction(const BaseOptKind& kind, const OptState& state,
                                        std::span<const double> g) {
  if (!all_finite(g)) throw NumericalError("update_direction: non-finite gradient");
  const std::size_t n = g.size();
  auto fresh_or = [n](const Vector& buf) {
    if (buf.empty()) return Vector(n, 0.0);
    if (buf.size() != n) throw DimensionError("update_direction: state size mismatch");
    return buf;
  };
  DirectionResult r{Vector(n), state};
  r.state.step = state.step + 1;
  switch (kind.type) {
    case BaseOptKind::Type::sgd:
      r.direction.assign(g.begin(), g.end());
      break;
    case BaseOptKind::Type::momentum: {
      r.state.m = fresh_or(state.m);
      for (std::size_t i = 0; i < n; ++i) r.state.m[i] = kind.beta1 * r.state.m[i] + g[i];
      r.direction = r.state.m;
      break;
    }
    case BaseOptKind::Type::rmsprop: {
      r.state.v = fresh_or(state.v);
      for (std::size_t i = 0; i < n; ++i) {
        r.state.v[i] = kind.beta2 * r.state.v[i] + (1.0 - kind.beta2) * g[i] * g[i];
        r.direction[i] = g[i] / (std::sqrt(r.state.v[i]) + kind.eps);
      }
      break;
    }
    case BaseOptKind::Type::adam: {
      r.state.m = fresh_or(state.m);
      r.state.v = fresh_or(state.v);
      const double t = static_cast<double>(r.state.step);
      const double c1 = 1.0 - std::pow(kind.beta1, t);
      const double c2 = 1.0 - std::pow(kind.beta2, t);
      for (std::size_t i = 0; i < n; ++i) {
        r.state.m[i] = kind.beta1 * r.state.m[i] + (1.0 - kind.beta1) * g[i];
        r.state.v[i] = kind.beta2 * r.state.v[i] + (1.0 - kind.beta2) * g[i] * g[i];
        r.direction[i] = (r.state.m[i] / c1) / (std::sqrt(r.state.v[i] / c2) + kind.eps);
      }
      break;
    }
  }
  if (!all_finite(r.direction)) throw NumericalError("update_direction: non-finite direction");
  return r;
}

/// theta' = theta - lr * direction.
inline Vector apply_lr_update(std::span<const double> theta, double lr, std::span<const double> direction) {
  if (theta.size() != direction.size()) throw DimensionError("apply_lr_update: length mismatch");
  Vector out(theta.begin(), theta.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * direction[i];
  return out;
}

inline ParamSet apply_lr_update(const ParamSet& theta, double lr, const ParamSet& direction) {
  ParamSet out = theta;
  out.axpy(-lr, direction);
  return out;
}

/// Adds coupled weight decay wd * theta to a gradient.
inline void add_weight_decay(ParamSet& grad, const ParamSet& theta, double wd) {
  if (wd != 0.0) grad.axpy(wd, theta);
}

}  // namespace apo

#endif  // APO_BASEOPT_HPP
