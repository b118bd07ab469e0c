#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "apo/baseopt.hpp"

using namespace apo;

TEST(UpdateDirection, SgdIsGradient) {
  const Vector g{0.3, -1.2, 5.0};
  const DirectionResult r = update_direction(BaseOptKind::sgd(), {}, g);
  EXPECT_EQ(r.direction, g);
  EXPECT_EQ(r.state.step, 1u);
}

TEST(UpdateDirection, MomentumRecurrence) {
  const auto k = BaseOptKind::momentum(0.9);
  const DirectionResult r1 = update_direction(k, {}, Vector{1.0});
  EXPECT_EQ(r1.direction, Vector{1.0});
  const DirectionResult r2 = update_direction(k, r1.state, Vector{1.0});
  EXPECT_DOUBLE_EQ(r2.direction[0], 1.9);
}

TEST(UpdateDirection, AdamFirstStepIsNearlySign) {
  const DirectionResult r = update_direction(BaseOptKind::adam(), {}, Vector{0.5});
  EXPECT_NEAR(r.direction[0], 0.99999998, 1e-12);
}

TEST(UpdateDirection, RmspropHasNoBiasCorrection) {
  const DirectionResult r = update_direction(BaseOptKind::rmsprop(0.99, 1e-8), {}, Vector{2.0});
  // v = 0.01 * 4, direction = 2 / (0.2 + eps)
  EXPECT_NEAR(r.direction[0], 2.0 / (0.2 + 1e-8), 1e-12);
}

TEST(UpdateDirection, DeterministicGivenInputs) {
  Rng rng(1);
  Vector g(20);
  for (auto& x : g) x = rng.normal();
  for (const auto& k : {BaseOptKind::sgd(), BaseOptKind::momentum(), BaseOptKind::rmsprop(), BaseOptKind::adam()}) {
    OptState s;
    for (int t = 0; t < 3; ++t) s = update_direction(k, s, g).state;
    const DirectionResult a = update_direction(k, s, g), b = update_direction(k, s, g);
    EXPECT_EQ(a.direction, b.direction);
    EXPECT_EQ(a.state, b.state);
  }
}

TEST(UpdateDirection, AdaptiveMethodsScaleInvariant) {
  Rng rng(2);
  for (const auto& k : {BaseOptKind::rmsprop(0.99, 1e-12), BaseOptKind::adam(0.9, 0.999, 1e-12)}) {
    OptState s1, s2;
    for (int t = 0; t < 5; ++t) {
      Vector g(10), g10(10);
      for (std::size_t i = 0; i < 10; ++i) {
        g[i] = rng.normal();
        g10[i] = 10.0 * g[i];
      }
      const DirectionResult a = update_direction(k, s1, g), b = update_direction(k, s2, g10);
      for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(a.direction[i], b.direction[i], 1e-6 * std::abs(a.direction[i]));
      s1 = a.state;
      s2 = b.state;
    }
  }
}

TEST(UpdateDirection, NonFiniteGradientRejected) {
  EXPECT_THROW(update_direction(BaseOptKind::sgd(), {}, Vector{1.0, std::numeric_limits<double>::quiet_NaN()}),
               NumericalError);
}

TEST(UpdateDirection, StateSizeMismatchRejected) {
  const OptState s = update_direction(BaseOptKind::momentum(), {}, Vector{1.0, 2.0}).state;
  EXPECT_THROW(update_direction(BaseOptKind::momentum(), s, Vector{1.0}), DimensionError);
}

TEST(UpdateDirection, SecondMomentsStayNonnegative) {
  Rng rng(3);
  OptState s;
  for (int t = 0; t < 50; ++t) {
    Vector g(8);
    for (auto& x : g) x = rng.normal() * 100.0;
    s = update_direction(BaseOptKind::adam(), s, g).state;
    for (double v : s.v) ASSERT_GE(v, 0.0);
  }
}

TEST(ApplyLrUpdate, ZeroLearningRate) {
  const Vector th{1.0, 2.0};
  EXPECT_EQ(apply_lr_update(th, 0.0, Vector{3.0, 4.0}), th);
}

TEST(ApplyLrUpdate, Elementwise) {
  const Vector r = apply_lr_update(Vector{1.0, 2.0}, 0.1, Vector{0.5, -1.0});
  EXPECT_DOUBLE_EQ(r[0], 0.95);
  EXPECT_DOUBLE_EQ(r[1], 2.1);
}

TEST(ApplyLrUpdate, ZeroDirection) {
  const Vector th{1.0, -2.0, 3.0};
  EXPECT_EQ(apply_lr_update(th, 0.7, Vector(3, 0.0)), th);
}

TEST(BaseOptKindTest, Validation) {
  EXPECT_NO_THROW(BaseOptKind::adam().validate());
  EXPECT_THROW(BaseOptKind::momentum(1.0).validate(), ContractError);
  EXPECT_THROW(BaseOptKind::rmsprop(0.9, 0.0).validate(), ContractError);
}

TEST(WeightDecay, AddsScaledParameters) {
  ParamSet g{{{Matrix{{1.0}}, Vector{0.0}}}};
  const ParamSet th{{{Matrix{{2.0}}, Vector{4.0}}}};
  add_weight_decay(g, th, 0.5);
  EXPECT_DOUBLE_EQ(g.layers[0].weight(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(g.layers[0].bias[0], 2.0);
}
